"""Accuracy computation, held-out evaluation, and curve export.

Cumulative accuracy is the success rate over every outcome so far; segment
accuracy covers consecutive fixed-size blocks (default 1,000) with a flagged
trailing partial block. Held-out evaluation runs the three tasks per patient
against frozen bases; a multi-choice adapter answers benchmark items through
the same prompt path.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import doctor as doctor_mod
from .doctor import DoctorAgent, TaskInstance
from .errors import EmptySeriesError, OverlapError
from .knowledge import KnowledgeBase, ground_truth_for
from .llm import Backend
from .memory import DIAGNOSIS, EXAMINATION, SOURCE_EXTERNAL, TASKS, TREATMENT, MedicalCase
from .patients import Cohort
from .templates import TemplateSet
from .world import SimulationLog

logger = logging.getLogger(__name__)


@dataclass
class OutcomeSeries:
    task: str
    outcomes: list[bool]

    def __len__(self) -> int:
        return len(self.outcomes)


def series_from_log(log: SimulationLog, task: str,
                    first_visit_only: bool = True) -> OutcomeSeries:
    """Per-patient outcome series in cohort order. Revisit decisions are
    excluded by default so index n means the n-th patient."""
    events = log.decision_events(task=task, first_visit_only=first_visit_only)
    events.sort(key=lambda e: e["t"])
    return OutcomeSeries(task=task, outcomes=[bool(e["correct"]) for e in events])


def cumulative_accuracy(series: OutcomeSeries) -> list[tuple[int, float]]:
    """accuracy(n) = correct-in-first-n / n for every prefix."""
    if not series.outcomes:
        raise EmptySeriesError("cannot compute accuracy of an empty series")
    points = []
    correct = 0
    for n, outcome in enumerate(series.outcomes, start=1):
        correct += outcome
        points.append((n, correct / n))
    return points


@dataclass(frozen=True)
class Segment:
    index: int  # 1-based block number
    accuracy: float
    size: int
    partial: bool


def segment_accuracy(series: OutcomeSeries, window: int = 1000) -> list[Segment]:
    """Non-overlapping consecutive blocks of `window` outcomes; a trailing
    partial block is reported with its actual size and flagged."""
    if window < 1:
        raise ValueError("window must be >= 1")
    segments = []
    for start in range(0, len(series.outcomes), window):
        block = series.outcomes[start : start + window]
        segments.append(
            Segment(
                index=start // window + 1,
                accuracy=sum(block) / len(block),
                size=len(block),
                partial=len(block) < window,
            )
        )
    return segments


# -- held-out task evaluation -----------------------------------------------------

@dataclass
class EvalReport:
    per_task: dict[str, float]
    per_disease: dict[str, dict[str, float]]  # task -> disease name -> accuracy
    counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "per_task": {t: round(a, 4) for t, a in self.per_task.items()},
            "per_disease": {
                t: {d: round(a, 4) for d, a in by_disease.items()}
                for t, by_disease in self.per_disease.items()
            },
            "counts": dict(self.counts),
        }

    def table(self) -> str:
        lines = ["task        accuracy"]
        for task in TASKS:
            if task in self.per_task:
                lines.append(f"{task:<12}{self.per_task[task] * 100:.2f}%")
        return "\n".join(lines)


def _base_fingerprint(doctor: DoctorAgent) -> str:
    digest = hashlib.sha256()
    for task in TASKS:
        for base in (doctor.case_bases[task], doctor.experience_bases[task]):
            digest.update(f"{task}:{len(base)}".encode())
            for entry in base.entries:
                digest.update(str(getattr(entry, "text", getattr(entry, "answer_text", ""))).encode())
    return digest.hexdigest()


def evaluate_tasks(doctor: DoctorAgent, cohort: Cohort, kb: KnowledgeBase,
                   backend: Backend, templates: TemplateSet,
                   train_record_hashes: set[str] | None = None,
                   chained_treatment: bool = False) -> EvalReport:
    """Run all three tasks per patient with frozen bases.

    Examination sees symptoms only; diagnosis additionally sees the
    ground-truth examination reports; treatment sees the ground-truth
    diagnosis by default (chained mode feeds the doctor's own diagnosis
    instead). Raises OverlapError if any record hash also appears in the
    training cohort."""
    if train_record_hashes:
        overlap = set(cohort.record_hashes()) & set(train_record_hashes)
        if overlap:
            raise OverlapError(
                f"{len(overlap)} test record(s) also appear in the training cohort"
            )
    fingerprint_before = _base_fingerprint(doctor)
    dept = doctor.department_id
    correct: dict[str, int] = {t: 0 for t in TASKS}
    disease_total: dict[str, dict[str, int]] = {t: {} for t in TASKS}
    disease_correct: dict[str, dict[str, int]] = {t: {} for t in TASKS}

    for record in cohort.records:
        truth = ground_truth_for(kb, record.truth.disease_id)
        disease_name = truth.correct_diagnosis
        truth_plan = truth.correct_treatments[record.truth.severity]

        exam_instance = TaskInstance(
            task=EXAMINATION,
            patient_view=record.doctor_view(include_reports=False),
            candidates=kb.candidate_examinations[dept],
            truth=frozenset(truth.correct_examinations),
            verify_truth_in_candidates=False,
        )
        diag_view = record.doctor_view(include_reports=True)
        diag_instance = TaskInstance(
            task=DIAGNOSIS,
            patient_view=diag_view,
            candidates=kb.candidate_diseases[dept],
            truth=disease_name,
            verify_truth_in_candidates=False,
        )
        decisions = {}
        for instance in (exam_instance, diag_instance):
            decisions[instance.task] = doctor_mod.answer(doctor, instance, backend, templates)

        if chained_treatment:
            diagnosis_text = (
                decisions[DIAGNOSIS].chosen[0] if decisions[DIAGNOSIS].chosen else ""
            )
        else:
            diagnosis_text = disease_name
        diagnosed = kb.disease_by_name(diagnosis_text)
        plans = (
            tuple(diagnosed.treatment_plans[s] for s in sorted(diagnosed.treatment_plans))
            if diagnosed is not None else ()
        )
        treat_view = record.doctor_view(include_reports=True)
        treat_view["diagnosis"] = diagnosis_text
        treat_instance = TaskInstance(
            task=TREATMENT,
            patient_view=treat_view,
            candidates=plans,
            truth=truth_plan,
            verify_truth_in_candidates=False,
        )
        decisions[TREATMENT] = doctor_mod.answer(doctor, treat_instance, backend, templates)

        for task, instance in ((EXAMINATION, exam_instance), (DIAGNOSIS, diag_instance),
                               (TREATMENT, treat_instance)):
            ok = doctor_mod.grade(decisions[task], instance)
            correct[task] += ok
            disease_total[task].setdefault(disease_name, 0)
            disease_correct[task].setdefault(disease_name, 0)
            disease_total[task][disease_name] += 1
            disease_correct[task][disease_name] += ok

    if _base_fingerprint(doctor) != fingerprint_before:
        raise RuntimeError("evaluation mutated a base; bases must stay frozen")

    n = len(cohort.records)
    return EvalReport(
        per_task={t: (correct[t] / n if n else 0.0) for t in TASKS},
        per_disease={
            t: {
                d: disease_correct[t][d] / disease_total[t][d]
                for d in sorted(disease_total[t])
            }
            for t in TASKS
        },
        counts={"patients": n},
    )


# -- multi-choice benchmark adapter -------------------------------------------------

@dataclass
class McqItem:
    question: str
    options: dict[str, str]  # label -> text
    answer: str  # label
    department: str | None = None

    def __post_init__(self):
        if self.answer not in self.options:
            raise ValueError(f"answer label {self.answer!r} not among options")


def load_mcq_items(path: str | Path) -> tuple[list[McqItem], int]:
    """One JSON item per line: question, options (label->text mapping or
    list), answer (label), optional meta.department. Returns (items,
    skipped_count)."""
    items: list[McqItem] = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                options = rec["options"]
                if isinstance(options, list):
                    options = {
                        doctor_mod.candidate_label(i): str(text) for i, text in enumerate(options)
                    }
                meta = rec.get("meta", {})
                items.append(McqItem(
                    question=rec["question"],
                    options={str(k): str(v) for k, v in options.items()},
                    answer=str(rec["answer"]),
                    department=rec.get("department") or meta.get("department"),
                ))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                skipped += 1
                logger.warning("skipping malformed MCQ item: %s", exc)
    return items, skipped


def ingest_labeled_cases(doctor: DoctorAgent, items: list[McqItem], backend: Backend,
                         task: str = DIAGNOSIS) -> int:
    """Hybrid mode: merge externally labeled Q&A into the case base."""
    added = 0
    for item in items:
        labels = sorted(item.options)
        question_text = item.question + "\nOptions:\n" + "\n".join(
            f"{l}) {item.options[l]}" for l in labels
        )
        case = MedicalCase(
            case_id=0,
            task=task,
            question_text=question_text,
            answer_text=item.options[item.answer],
            embedding=backend.embed(question_text),
            source=SOURCE_EXTERNAL,
        )
        doctor.case_bases[task].add_case(case, encoder_name=backend.encoder_name)
        added += 1
    return added


@dataclass
class McqReport:
    accuracy: float
    total: int
    correct: int
    skipped: int
    per_department: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "accuracy": round(self.accuracy, 4),
            "total": self.total,
            "correct": self.correct,
            "skipped": self.skipped,
            "per_department": {d: round(a, 4) for d, a in self.per_department.items()},
        }


def evaluate_mcq(doctor: DoctorAgent, items: list[McqItem], backend: Backend,
                 templates: TemplateSet, task: str = DIAGNOSIS,
                 skipped: int = 0) -> McqReport:
    """Answer each item through the standard prompt path with the options as
    candidates; accuracy is exact label match."""
    fingerprint_before = _base_fingerprint(doctor)
    correct = 0
    dept_total: dict[str, int] = {}
    dept_correct: dict[str, int] = {}
    for item in items:
        labels = sorted(item.options)
        candidates = tuple(item.options[l] for l in labels)
        instance = TaskInstance(
            task=task,
            patient_view={"narrative": item.question},
            candidates=candidates,
            truth=item.options[item.answer],
            verify_truth_in_candidates=False,
        )
        decision = doctor_mod.answer(doctor, instance, backend, templates)
        ok = doctor_mod.grade(decision, instance)
        correct += ok
        if item.department:
            dept_total[item.department] = dept_total.get(item.department, 0) + 1
            dept_correct[item.department] = dept_correct.get(item.department, 0) + ok
    if _base_fingerprint(doctor) != fingerprint_before:
        raise RuntimeError("evaluation mutated a base; bases must stay frozen")
    total = len(items)
    return McqReport(
        accuracy=correct / total if total else 0.0,
        total=total,
        correct=correct,
        skipped=skipped,
        per_department={
            d: dept_correct[d] / dept_total[d] for d in sorted(dept_total)
        },
    )


# -- exports ------------------------------------------------------------------------

def export_curves(series_list: list[OutcomeSeries], path: str | Path,
                  fmt: str = "csv", window: int = 1000,
                  department: str = "") -> Path:
    """Write cumulative and segment curves for each series. Output is
    byte-stable for identical input; floats keep full precision."""
    rows = []
    for series in series_list:
        for n, acc in cumulative_accuracy(series):
            rows.append({
                "series": "cumulative", "index": n, "accuracy": repr(acc),
                "task": series.task, "department": department, "window_size": "",
            })
        for segment in segment_accuracy(series, window=window):
            rows.append({
                "series": "segment", "index": segment.index,
                "accuracy": repr(segment.accuracy), "task": series.task,
                "department": department, "window_size": segment.size,
            })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = ["series", "index", "accuracy", "task", "department", "window_size"]
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    elif fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return path
