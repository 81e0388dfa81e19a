"""The closed-cycle hospital world.

Each patient visit walks the eight-event cycle (onset, triage, registration,
consultation, examination, diagnosis, dispensary, convalescence); failed
recovery loops back through a revisit until a cap, and doctors optionally
read documents at simulated day boundaries. Every transition, decision, and
learning event lands in an append-only audit log that alone reconstructs
base sizes and accuracy curves. Timestamps are logical event counters so
identical runs produce byte-identical logs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from . import doctor as doctor_mod
from .doctor import DoctorAgent, DoctorConfig, TaskInstance
from .errors import CheckpointError, IllegalPhaseError, UnroutableError
from .knowledge import KnowledgeBase, ground_truth_for
from .llm import Backend, user_request
from .memory import DIAGNOSIS, EXAMINATION, TASKS, TREATMENT
from .patients import FIRST_NAMES, LAST_NAMES, Cohort, PatientRecord, _normalize
from .templates import TemplateSet

logger = logging.getLogger(__name__)

ONSET = "Onset"
TRIAGE = "Triage"
REGISTRATION = "Registration"
CONSULTATION = "Consultation"
EXAMINATION_PHASE = "Examination"
DIAGNOSIS_PHASE = "Diagnosis"
DISPENSARY = "Dispensary"
CONVALESCENCE = "Convalescence"
REVISIT = "Revisit"
RECOVERED = "Recovered"
UNRECOVERED = "Unrecovered"

TERMINAL_PHASES = (RECOVERED, UNRECOVERED)

# Per-patient legal transition sequence, used by tests and by replay checks.
TRANSITION_LANGUAGE = re.compile(
    r"^Onset( Triage Registration Consultation Examination Diagnosis Dispensary"
    r" Convalescence)( Revisit Triage Registration Consultation Examination"
    r" Diagnosis Dispensary Convalescence)* (Recovered|Unrecovered)$"
)

NURSE_ROLES = ("triage", "registration", "examination", "dispensary")


@dataclass
class WorldConfig:
    departments_enabled: list[str] | None = None  # None = all clinical with diseases
    doctors_total: int = 42
    nurses_total: int = 4
    max_revisits: int = 3
    reading_schedule: int = 0  # documents per simulated day, 0 = off
    visits_per_day: int = 50
    seed: int = 0
    recovery_policy: str = "deterministic"  # deterministic | stochastic
    p_recover_correct: float = 1.0
    p_recover_wrong: float = 0.0
    chained_treatment: bool = True  # treatment candidates follow the doctor's diagnosis


@dataclass
class VisitState:
    patient_id: str
    phase: str = ONSET
    visit_index: int = 1
    triaged_department: str | None = None
    chosen_examinations: tuple[str, ...] = ()
    examination_reports_released: dict[str, str] = field(default_factory=dict)
    diagnosis: str | None = None
    prescription: str | None = None


class SimulationLog:
    """Append-only event stream; the in-memory list mirrors the file.

    On resume, `truncate_to` (a byte offset from the checkpoint) drops any
    partial events written after the last completed patient, so the resumed
    log reads as one seamless run.
    """

    def __init__(self, path: str | Path | None = None, resume: bool = False,
                 truncate_to: int | None = None):
        self.events: list[dict] = []
        self._fh = None
        self._t = 0
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            if resume and path.exists():
                if truncate_to is not None:
                    with open(path, "r+b") as fh:
                        fh.truncate(truncate_to)
                with open(path, encoding="utf-8") as fh:
                    self.events = [json.loads(line) for line in fh if line.strip()]
                self._t = self.events[-1]["t"] if self.events else 0
            self._fh = open(path, "a" if resume else "w", encoding="utf-8")

    def emit(self, kind: str, **fields) -> dict:
        self._t += 1
        event = {"t": self._t, "kind": kind, **fields}
        self.events.append(event)
        if self._fh is not None:
            self._fh.write(json.dumps(event, sort_keys=True) + "\n")
            self._fh.flush()
        return event

    def offset(self) -> int | None:
        if self._fh is None:
            return None
        self._fh.flush()
        return self._fh.tell()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    # -- replay helpers ----------------------------------------------------

    def transitions_by_patient(self) -> dict[str, list[str]]:
        phases: dict[str, list[str]] = {}
        for event in self.events:
            if event["kind"] == "transition":
                phases.setdefault(event["patient_id"], []).append(event["phase"])
        return phases

    def decision_events(self, task: str | None = None,
                        first_visit_only: bool = False) -> list[dict]:
        out = []
        for event in self.events:
            if event["kind"] != "decision":
                continue
            if task is not None and event["task"] != task:
                continue
            if first_visit_only and event["visit_index"] != 1:
                continue
            out.append(event)
        return out

    def learning_counts(self) -> dict[str, dict[str, int]]:
        counts = {task: {"case_added": 0, "principle_validated": 0,
                         "principle_discarded": 0, "book_cases": 0}
                  for task in TASKS}
        for event in self.events:
            if event["kind"] == "learning":
                counts[event["task"]][event["event"]] += 1
            elif event["kind"] == "books":
                for task, ids in event["case_ids"].items():
                    counts[task]["book_cases"] += len(ids)
        return counts

    def outcome_counts(self) -> dict[str, int]:
        counts = {RECOVERED: 0, UNRECOVERED: 0}
        for event in self.events:
            if event["kind"] == "outcome":
                counts[event["outcome"]] += 1
        return counts


@dataclass
class World:
    kb: KnowledgeBase
    config: WorldConfig
    doctor_config: DoctorConfig = field(default_factory=DoctorConfig)
    templates: TemplateSet | None = None
    books: list[str] = field(default_factory=list)
    doctors: dict[str, DoctorAgent] = field(default_factory=dict)
    nurses: dict[str, str] = field(default_factory=dict)
    log: SimulationLog = field(default_factory=SimulationLog)
    mode: str = "train"
    triage_mode: str = "rules"  # rules | chat

    def __post_init__(self):
        if self.templates is None:
            from .templates import default_templates

            self.templates = default_templates()
        if self.config.departments_enabled is None:
            with_diseases = {d.department_id for d in self.kb.diseases}
            self.config.departments_enabled = sorted(
                d.id for d in self.kb.clinical_departments() if d.id in with_diseases
            )
        enabled = self.config.departments_enabled
        for dept_id in enabled:
            dept = self.kb.department(dept_id)
            if dept.kind != "clinical":
                raise ValueError(f"cannot enable non-clinical department {dept_id!r}")
        if self.config.doctors_total < len(enabled):
            raise ValueError(
                f"roster of {self.config.doctors_total} doctors cannot staff "
                f"{len(enabled)} departments"
            )
        rng = random.Random(f"roster:{self.config.seed}")
        if not self.doctors:
            for dept_id in enabled:
                name = f"Dr. {rng.choice(FIRST_NAMES)} {rng.choice(LAST_NAMES)}"
                self.doctors[dept_id] = DoctorAgent(
                    doctor_id=f"doc-{dept_id}",
                    name=name,
                    department_id=dept_id,
                    config=self.doctor_config,
                )
        if not self.nurses:
            for role in NURSE_ROLES:
                self.nurses[role] = f"Nurse {rng.choice(FIRST_NAMES)} {rng.choice(LAST_NAMES)}"
        self._records: dict[str, PatientRecord] = {}
        self._patient_order: dict[str, int] = {}

    def register_patient(self, record: PatientRecord, order: int):
        self._records[record.patient_id] = record
        self._patient_order[record.patient_id] = order

    def record_of(self, patient_id: str) -> PatientRecord:
        return self._records[patient_id]


# -- triage ------------------------------------------------------------------

def triage(nurse_name: str, patient_view: dict, kb: KnowledgeBase,
           backend: Backend | None = None, templates: TemplateSet | None = None,
           enabled: list[str] | None = None) -> str:
    """Route symptoms to an enabled clinical department. Rules mode picks the
    department of the disease with the highest symptom-vocabulary overlap
    (ties to the lexicographically smaller department id); chat mode asks the
    backend and accepts only an enabled department name."""
    symptoms = patient_view.get("symptoms") or []
    if not symptoms:
        raise UnroutableError("patient reports no symptoms")
    enabled_set = set(enabled) if enabled is not None else {
        d.id for d in kb.clinical_departments()
    }
    if backend is None:
        best_overlap = 0
        best_dept: str | None = None
        for disease in kb.diseases:
            if disease.department_id not in enabled_set:
                continue
            vocab_norm = [_normalize(v) for v in disease.symptoms]
            overlap = 0
            for symptom in symptoms:
                s_norm = _normalize(symptom)
                if any(v in s_norm or s_norm in v for v in vocab_norm):
                    overlap += 1
            if overlap > best_overlap or (
                overlap == best_overlap and overlap > 0
                and best_dept is not None and disease.department_id < best_dept
            ):
                best_overlap = overlap
                best_dept = disease.department_id
        if best_dept is None:
            raise UnroutableError("symptoms match no enabled department")
        return best_dept

    if templates is None:
        from .templates import default_templates

        templates = default_templates()
    dept_names = {
        kb.department(d).name: d for d in sorted(enabled_set)
    }
    prompt = templates.render(
        "triage",
        nurse_name=nurse_name,
        symptoms="; ".join(symptoms),
        department_list="\n".join(f"- {n}" for n in dept_names),
    )
    for _ in range(2):
        reply = backend.chat(user_request(prompt, tag="triage"))
        match = re.search(r"department\s*:\s*(.+)", reply, re.IGNORECASE)
        raw = (match.group(1) if match else reply).strip()
        norm = _normalize(raw)
        for name, dept_id in dept_names.items():
            if _normalize(name) == norm or norm in _normalize(name):
                return dept_id
    raise UnroutableError(f"triage reply names no enabled department: {raw!r}")


# -- task instances -------------------------------------------------------------

def examination_instance(world: World, record: PatientRecord,
                         dept: str | None = None) -> TaskInstance:
    """Candidates come from the consulted (triaged) department; a mis-triage
    legitimately leaves the truth outside the candidate list."""
    truth = ground_truth_for(world.kb, record.truth.disease_id)
    dept = dept or record_department(world, record)
    return TaskInstance(
        task=EXAMINATION,
        patient_view=record.doctor_view(include_reports=False),
        candidates=world.kb.candidate_examinations[dept],
        truth=frozenset(truth.correct_examinations),
        verify_truth_in_candidates=False,
    )


def diagnosis_instance(world: World, record: PatientRecord,
                       released_reports: dict[str, str],
                       dept: str | None = None) -> TaskInstance:
    truth = ground_truth_for(world.kb, record.truth.disease_id)
    dept = dept or record_department(world, record)
    view = record.doctor_view(include_reports=False)
    view["examination_reports"] = dict(released_reports)
    return TaskInstance(
        task=DIAGNOSIS,
        patient_view=view,
        candidates=world.kb.candidate_diseases[dept],
        truth=truth.correct_diagnosis,
        verify_truth_in_candidates=False,
    )


def treatment_instance(world: World, record: PatientRecord,
                       released_reports: dict[str, str],
                       diagnosis_text: str) -> TaskInstance:
    truth = ground_truth_for(world.kb, record.truth.disease_id)
    truth_plan = truth.correct_treatments[record.truth.severity]
    if world.config.chained_treatment:
        diagnosed = world.kb.disease_by_name(diagnosis_text)
    else:
        diagnosed = world.kb.disease(record.truth.disease_id)
    candidates = tuple(
        diagnosed.treatment_plans[s] for s in sorted(diagnosed.treatment_plans)
    ) if diagnosed is not None else ()
    view = record.doctor_view(include_reports=False)
    view["examination_reports"] = dict(released_reports)
    view["diagnosis"] = diagnosis_text
    return TaskInstance(
        task=TREATMENT,
        patient_view=view,
        candidates=candidates,
        truth=truth_plan,
        verify_truth_in_candidates=False,
    )


def record_department(world: World, record: PatientRecord) -> str:
    return world.kb.disease(record.truth.disease_id).department_id


# -- stepping ---------------------------------------------------------------------

def convalesce(state: VisitState, treatment_correct: bool, config: WorldConfig,
               rng: random.Random) -> str:
    """Recovery rule: deterministic follows the treatment grade; stochastic
    recovers with p_recover_correct / p_recover_wrong."""
    if config.recovery_policy == "deterministic":
        recovered = treatment_correct
    else:
        p = config.p_recover_correct if treatment_correct else config.p_recover_wrong
        recovered = rng.random() < p
    if recovered:
        return RECOVERED
    if state.visit_index >= config.max_revisits:
        return UNRECOVERED
    return REVISIT


def _decide(world: World, state: VisitState, record: PatientRecord,
            instance: TaskInstance, backend: Backend):
    dept = state.triaged_department or record_department(world, record)
    doc = world.doctors.get(dept)
    if doc is None:
        # Mis-triage to a department without a doctor still needs a decision;
        # fall back to the disease's own department.
        doc = world.doctors[record_department(world, record)]
    decision = doctor_mod.answer(
        doc, instance, backend, world.templates,
        department_name=world.kb.department(doc.department_id).name,
    )
    correct = doctor_mod.grade(decision, instance)
    world.log.emit(
        "decision",
        patient_id=record.patient_id,
        patient_index=world._patient_order.get(record.patient_id, -1),
        visit_index=state.visit_index,
        task=instance.task,
        doctor_id=doc.doctor_id,
        chosen=list(decision.chosen),
        correct=correct,
        novel=decision.novel,
        n_cases_in_prompt=len(decision.retrieved_cases),
        n_experiences_in_prompt=len(decision.retrieved_experiences),
        prompt=decision.prompt_text,
    )
    if world.mode == "train":
        event = doctor_mod.learn_from_outcome(
            doc, instance, decision, backend, world.templates, correct=correct
        )
        world.log.emit(
            "learning",
            patient_id=record.patient_id,
            task=instance.task,
            doctor_id=doc.doctor_id,
            event=event.kind,
            case_id=event.case_id,
            principle_id=event.principle_id,
        )
    return decision, correct


def step(state: VisitState, world: World, backend: Backend | None) -> VisitState:
    """Execute exactly the current phase and return the successor state;
    every transition is appended to the world log."""
    if state.phase in TERMINAL_PHASES:
        raise IllegalPhaseError(f"cannot step a terminal state ({state.phase})")
    record = world.record_of(state.patient_id)

    def goto(phase: str, **kw):
        for key, value in kw.items():
            setattr(state, key, value)
        state.phase = phase
        world.log.emit(
            "transition",
            patient_id=state.patient_id,
            visit_index=state.visit_index,
            phase=phase,
            actor=_actor_for(world, phase, state),
        )
        return state

    if state.phase == ONSET:
        return goto(TRIAGE)
    if state.phase == TRIAGE:
        dept = triage(
            world.nurses["triage"], record.doctor_view(), world.kb,
            backend=backend if world.triage_mode == "chat" else None,
            templates=world.templates,
            enabled=world.config.departments_enabled,
        )
        return goto(REGISTRATION, triaged_department=dept)
    if state.phase == REGISTRATION:
        return goto(CONSULTATION)
    if state.phase == CONSULTATION:
        instance = examination_instance(world, record, dept=state.triaged_department)
        decision, _correct = _decide(world, state, record, instance, backend)
        return goto(EXAMINATION_PHASE, chosen_examinations=tuple(decision.chosen))
    if state.phase == EXAMINATION_PHASE:
        released = {}
        for modality in state.chosen_examinations:
            if modality in record.examination_reports:
                released[modality] = record.examination_reports[modality]
            else:
                released[modality] = "No abnormal findings."
        return goto(DIAGNOSIS_PHASE, examination_reports_released=released)
    if state.phase == DIAGNOSIS_PHASE:
        diag_instance = diagnosis_instance(
            world, record, state.examination_reports_released,
            dept=state.triaged_department,
        )
        diag_decision, _c = _decide(world, state, record, diag_instance, backend)
        diagnosis_text = diag_decision.chosen[0] if diag_decision.chosen else ""
        treat_instance = treatment_instance(
            world, record, state.examination_reports_released, diagnosis_text
        )
        treat_decision, _c = _decide(world, state, record, treat_instance, backend)
        prescription = treat_decision.chosen[0] if treat_decision.chosen else ""
        return goto(DISPENSARY, diagnosis=diagnosis_text, prescription=prescription)
    if state.phase == DISPENSARY:
        return goto(CONVALESCENCE)
    if state.phase == CONVALESCENCE:
        truth = ground_truth_for(world.kb, record.truth.disease_id)
        truth_plan = truth.correct_treatments[record.truth.severity]
        correct = (
            state.prescription is not None
            and doctor_mod.normalize_answer(state.prescription)
            == doctor_mod.normalize_answer(truth_plan)
        )
        rng = random.Random(
            f"convalesce:{world.config.seed}:{state.patient_id}:{state.visit_index}"
        )
        outcome = convalesce(state, correct, world.config, rng)
        if outcome in TERMINAL_PHASES:
            goto(outcome)
            world.log.emit(
                "outcome",
                patient_id=state.patient_id,
                outcome=outcome,
                visits=state.visit_index,
            )
            return state
        return goto(REVISIT)
    if state.phase == REVISIT:
        return goto(
            TRIAGE,
            visit_index=state.visit_index + 1,
            chosen_examinations=(),
            examination_reports_released={},
            diagnosis=None,
            prescription=None,
        )
    raise IllegalPhaseError(f"unknown phase {state.phase!r}")


def _actor_for(world: World, phase: str, state: VisitState) -> str:
    if phase in (TRIAGE,):
        return world.nurses["triage"]
    if phase == REGISTRATION:
        return world.nurses["registration"]
    if phase == EXAMINATION_PHASE:
        return world.nurses["examination"]
    if phase == DISPENSARY:
        return world.nurses["dispensary"]
    if phase in (CONSULTATION, DIAGNOSIS_PHASE):
        dept = state.triaged_department
        if dept and dept in world.doctors:
            return world.doctors[dept].name
    return "patient"


# -- checkpointing ------------------------------------------------------------------

def save_checkpoint(path: str | Path, cohort_hash: str, last_index: int,
                    record_hashes: list[str],
                    base_offsets: dict[str, int] | None = None,
                    log_offset: int | None = None):
    payload = {
        "schema_version": 1,
        "cohort_hash": cohort_hash,
        "last_index": last_index,
        "base_offsets": base_offsets or {},
        "log_offset": log_offset,
        "record_hashes": record_hashes,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("schema_version") != 1:
        raise CheckpointError(f"unsupported checkpoint version in {path}")
    return payload


# -- run loop ----------------------------------------------------------------------

def run(world: World, cohort: Cohort, mode: str, backend: Backend | None,
        checkpoint_path: str | Path | None = None,
        resume: bool = False) -> SimulationLog:
    """Process the cohort strictly in order. Train mode learns after every
    graded decision and reads documents at day boundaries; eval mode asserts
    the bases stay frozen. A checkpoint (when given) makes the run resumable
    after the last completed patient."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    world.mode = mode
    cohort_hash = cohort.content_hash()
    record_hashes = cohort.record_hashes()
    start_index = 0
    if resume:
        if checkpoint_path is None:
            raise CheckpointError("resume requested without a checkpoint path")
        payload = load_checkpoint(checkpoint_path)
        if payload["cohort_hash"] != cohort_hash:
            raise CheckpointError("checkpoint was written for a different cohort")
        start_index = payload["last_index"]

    sizes_before = {d: doc.base_sizes() for d, doc in world.doctors.items()}

    for index in range(start_index, len(cohort.records)):
        record = cohort.records[index]
        world.register_patient(record, index + 1)
        state = VisitState(patient_id=record.patient_id)
        world.log.emit(
            "transition", patient_id=record.patient_id, visit_index=1,
            phase=ONSET, actor="patient",
        )
        while state.phase not in TERMINAL_PHASES:
            state = step(state, world, backend)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, cohort_hash, index + 1, record_hashes,
                            base_offsets=base_file_offsets(world),
                            log_offset=world.log.offset())
        if (
            mode == "train"
            and world.config.reading_schedule > 0
            and world.books
            and world.config.visits_per_day > 0
            and (index + 1) % world.config.visits_per_day == 0
        ):
            _read_day_books(world, backend, day=(index + 1) // world.config.visits_per_day)

    if mode == "eval":
        sizes_after = {d: doc.base_sizes() for d, doc in world.doctors.items()}
        if sizes_before != sizes_after:
            raise RuntimeError("evaluation mutated a base; bases must stay frozen")
    return world.log


def _read_day_books(world: World, backend: Backend, day: int):
    count = world.config.reading_schedule
    picks = [world.books[(day * count + i) % len(world.books)] for i in range(count)]
    for dept_id, doc in world.doctors.items():
        report = doctor_mod.read_books(doc, picks, backend, world.templates)
        world.log.emit(
            "books",
            doctor_id=doc.doctor_id,
            day=day,
            cases_added=report.cases_added,
            items_skipped=report.items_skipped,
            case_ids=report.case_ids,
        )


def base_file_offsets(world: World) -> dict[str, int]:
    """Byte offsets of every attached base file, for checkpoint truncation."""
    offsets: dict[str, int] = {}
    for doc in world.doctors.values():
        for bases in (doc.case_bases, doc.experience_bases):
            for base in bases.values():
                if base._persist_fh is not None:
                    base._persist_fh.flush()
                    offsets[str(base._persist_path)] = base._persist_fh.tell()
    return offsets


def check_transition_language(log: SimulationLog) -> list[str]:
    """Patient ids whose phase sequence violates the legal cycle."""
    bad = []
    for patient_id, phases in log.transitions_by_patient().items():
        if TRANSITION_LANGUAGE.match(" ".join(phases)) is None:
            bad.append(patient_id)
    return bad


def cohort_file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
