"""Doctor agent decision and evolution engine.

A doctor answers three task kinds (examination selection, diagnosis,
treatment) through a four-section structured prompt with retrieval-augmented
context, then evolves: correct answers are stored as reference cases,
wrong answers are reflected into candidate principles that must survive a
validation gate before they become retrievable experience. Reading medical
documents converts them into multi-choice cases, which also seed the
exemplar pool the validation gate draws from.
"""

from __future__ import annotations

import logging
import re
import string
from dataclasses import dataclass, field

from .errors import AnswerParseError, ReflectionParseError
from .llm import Backend, user_request
from .memory import (
    CASE_KIND,
    DIAGNOSIS,
    EXAMINATION,
    EXPERIENCE_KIND,
    STATUS_CANDIDATE,
    STATUS_DISCARDED,
    STATUS_VALIDATED,
    SOURCE_BOOK,
    TASKS,
    TREATMENT,
    MedicalCase,
    ExperiencePrinciple,
    Origin,
    VectorBase,
)
from .templates import TemplateSet

logger = logging.getLogger(__name__)

_DECISION_TEMPLATE = {
    EXAMINATION: "decision_examination",
    DIAGNOSIS: "decision_diagnosis",
    TREATMENT: "decision_treatment",
}


@dataclass
class DoctorConfig:
    top_cases: int = 3
    top_experiences: int = 4
    use_cases: bool = True
    use_experience: bool = True
    helpfulness_judge: bool = True
    validation_exemplars: int = 3
    validate_origin_retry: bool = True
    validate_exemplar_check: bool = True
    store_candidates_in_question: bool = False


@dataclass
class ExemplarQA:
    """A held-out Q&A item (from book reading) used to vet new principles."""

    task: str
    question_text: str
    candidates: tuple[str, ...]
    answer: str


@dataclass
class DoctorAgent:
    doctor_id: str
    name: str
    department_id: str
    config: DoctorConfig = field(default_factory=DoctorConfig)
    case_bases: dict[str, VectorBase] = field(default_factory=dict)
    experience_bases: dict[str, VectorBase] = field(default_factory=dict)
    exemplar_pool: dict[str, list[ExemplarQA]] = field(default_factory=dict)

    def __post_init__(self):
        for task in TASKS:
            self.case_bases.setdefault(task, VectorBase(CASE_KIND, task))
            self.experience_bases.setdefault(task, VectorBase(EXPERIENCE_KIND, task))
            self.exemplar_pool.setdefault(task, [])

    def base_sizes(self) -> dict[str, dict[str, int]]:
        return {
            task: {
                "cases": len(self.case_bases[task]),
                "experience": len(self.experience_bases[task]),
            }
            for task in TASKS
        }


@dataclass
class TaskInstance:
    task: str
    patient_view: dict
    candidates: tuple[str, ...]
    truth: frozenset[str] | str
    verify_truth_in_candidates: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        self.candidates = tuple(self.candidates)
        if self.task == EXAMINATION:
            if "examination_reports" in self.patient_view:
                raise ValueError("examination task must not see examination reports")
            self.truth = frozenset(self.truth)
        if self.verify_truth_in_candidates and self.candidates:
            wanted = self.truth if isinstance(self.truth, frozenset) else {self.truth}
            missing = [t for t in wanted if t not in self.candidates]
            if missing:
                raise ValueError(f"truth value(s) {missing} absent from candidates")


@dataclass
class Decision:
    chosen: tuple[str, ...]
    reasoning: str
    retrieved_cases: list = field(default_factory=list)
    retrieved_experiences: list = field(default_factory=list)
    novel: bool = False
    prompt_text: str = ""
    question_text: str = ""


@dataclass
class LearningEvent:
    kind: str  # case_added | principle_validated | principle_discarded | noop
    task: str
    case_id: int | None = None
    principle_id: int | None = None


# -- rendering ------------------------------------------------------------------

def render_patient_information(view: dict) -> str:
    """Deterministic text of the doctor-visible patient fields; doubles as
    the stored question text for retrieval."""
    if "narrative" in view:
        return str(view["narrative"]).strip()
    lines = [
        f"Patient ID: {view.get('patient_id', 'unknown')}",
        f"Name: {view.get('name', 'unknown')}",
        f"Gender: {view.get('gender', 'unknown')}",
        f"Age: {view.get('age', 'unknown')}",
        "Medical history: " + ("; ".join(view.get("medical_history", [])) or "none reported"),
        "Symptoms: " + "; ".join(view.get("symptoms", [])),
    ]
    reports = view.get("examination_reports")
    if reports:
        lines.append("Examination reports:")
        for modality in sorted(reports):
            lines.append(f"- {modality}: {reports[modality]}")
    if "diagnosis" in view:
        lines.append(f"Diagnosis: {view['diagnosis']}")
    return "\n".join(lines)


def candidate_label(i: int) -> str:
    letters = string.ascii_uppercase
    if i < len(letters):
        return letters[i]
    return letters[i // len(letters) - 1] + letters[i % len(letters)]


def render_candidates(candidates: tuple[str, ...]) -> str:
    if not candidates:
        return "(no candidate list; answer in your own words)"
    return "\n".join(f"{candidate_label(i)}) {c}" for i, c in enumerate(candidates))


def _experience_block(cases, experiences, injected_text: str | None) -> str:
    """The optional fourth prompt section. Empty string when there is
    nothing to show (or both sources are disabled)."""
    parts: list[str] = []
    if cases:
        lines = ["Reference cases:"]
        for i, (case, _sim) in enumerate(cases, start=1):
            lines.append(f"{i}. Q: {case.question_text}")
            lines.append(f"   A: {case.answer_text}")
        parts.append("\n".join(lines))
    if experiences or injected_text:
        lines = ["Practice principles:"]
        n = 0
        if injected_text:
            n += 1
            lines.append(f"{n}. (candidate under review) {injected_text}")
        for principle, _sim in experiences:
            n += 1
            lines.append(f"{n}. {principle.text}")
        parts.append("\n".join(lines))
    if not parts:
        return ""
    return "\n[Personal Experience]\n" + "\n\n".join(parts) + "\n"


def question_text_for(doctor: DoctorAgent, instance: TaskInstance) -> str:
    text = render_patient_information(instance.patient_view)
    if doctor.config.store_candidates_in_question and instance.candidates:
        text += "\nCandidates:\n" + render_candidates(instance.candidates)
    return text


# -- retrieval + prompt ----------------------------------------------------------

@dataclass
class PromptBundle:
    request: object
    cases: list
    experiences: list
    question_text: str
    prompt_text: str


def judge_helpfulness(doctor: DoctorAgent, instance: TaskInstance, retrieved,
                      backend: Backend, templates: TemplateSet) -> list:
    """One chat call deciding which retrieved principles to keep. Garbage
    output keeps everything (a judge outage must not block treatment)."""
    if not retrieved:
        return []
    principle_list = "\n".join(
        f"{i}. {p.text}" for i, (p, _s) in enumerate(retrieved, start=1)
    )
    prompt = templates.render(
        "judge_helpfulness",
        doctor_name=doctor.name,
        patient_information=render_patient_information(instance.patient_view),
        principle_list=principle_list,
    )
    reply = backend.chat(user_request(prompt, tag="judge"))
    match = re.search(r"keep\s*:\s*(.+)", reply, re.IGNORECASE)
    if match is None:
        logger.warning("helpfulness judge output unparseable; keeping all %d", len(retrieved))
        return list(retrieved)
    body = match.group(1).strip()
    if body.casefold().startswith("none"):
        return []
    indices = [int(n) for n in re.findall(r"\d+", body)]
    if not indices or any(i < 1 or i > len(retrieved) for i in indices):
        logger.warning("helpfulness judge keep-set invalid (%r); keeping all", body)
        return list(retrieved)
    keep = sorted(set(indices))
    return [retrieved[i - 1] for i in keep]


def prepare_prompt(doctor: DoctorAgent, instance: TaskInstance, backend: Backend,
                   templates: TemplateSet, department_name: str | None = None,
                   injected_principle: str | None = None,
                   tag_prefix: str = "") -> PromptBundle:
    cfg = doctor.config
    question = question_text_for(doctor, instance)
    cases: list = []
    experiences: list = []
    need_query = (cfg.use_cases and len(doctor.case_bases[instance.task])) or (
        cfg.use_experience and len(doctor.experience_bases[instance.task])
    )
    if need_query:
        query = backend.embed(question)
        if cfg.use_cases:
            cases = doctor.case_bases[instance.task].retrieve(
                query, cfg.top_cases, encoder_name=backend.encoder_name
            )
        if cfg.use_experience:
            experiences = doctor.experience_bases[instance.task].retrieve(
                query, cfg.top_experiences, encoder_name=backend.encoder_name
            )
            if experiences and cfg.helpfulness_judge:
                experiences = judge_helpfulness(doctor, instance, experiences,
                                                backend, templates)
    prompt = templates.render(
        _DECISION_TEMPLATE[instance.task],
        doctor_name=doctor.name,
        department_name=department_name or doctor.department_id,
        patient_information=render_patient_information(instance.patient_view),
        candidate_choices=render_candidates(instance.candidates),
        personal_experience_block=_experience_block(cases, experiences, injected_principle),
    )
    request = user_request(prompt, tag=f"{tag_prefix}{instance.task}")
    return PromptBundle(request=request, cases=cases, experiences=experiences,
                        question_text=question, prompt_text=prompt)


def build_prompt(doctor: DoctorAgent, instance: TaskInstance, backend: Backend,
                 templates: TemplateSet, **kw):
    """Structured four-section request (instruction, patient information,
    candidate choices, personal experience) for one task instance."""
    return prepare_prompt(doctor, instance, backend, templates, **kw).request


# -- answering -------------------------------------------------------------------

def normalize_answer(text: str) -> str:
    collapsed = " ".join(text.casefold().split())
    return collapsed.strip().rstrip(".!?,;:").strip()


_ANSWER_RE = re.compile(r"^\s*answer\s*:\s*(.*\S)\s*$", re.IGNORECASE | re.MULTILINE)
_LABEL_RE = re.compile(r"^[\(\[]?([A-Za-z])[\)\].:]?$")


def _resolve_piece(piece: str, candidates: tuple[str, ...]) -> tuple[str, bool]:
    piece = piece.strip()
    match = _LABEL_RE.match(piece)
    if match and candidates:
        index = string.ascii_uppercase.index(match.group(1).upper())
        if index < len(candidates):
            return candidates[index], False
    norm = normalize_answer(piece)
    for candidate in candidates:
        if normalize_answer(candidate) == norm:
            return candidate, False
    return piece, True


def parse_answer(output: str, instance: TaskInstance) -> tuple[tuple[str, ...], bool]:
    """Resolve the model output to candidates: exact label, then normalized
    text, else the free text verbatim flagged as novel."""
    if not output or not output.strip():
        raise AnswerParseError("model output empty")
    matches = _ANSWER_RE.findall(output)
    answer_line = matches[-1] if matches else output.strip().splitlines()[-1]
    if instance.task == EXAMINATION:
        pieces = [p for p in re.split(r"[,;]", answer_line) if p.strip()]
    else:
        pieces = [answer_line]
    resolved = []
    novel = False
    for piece in pieces:
        value, piece_novel = _resolve_piece(piece, instance.candidates)
        novel = novel or piece_novel
        if value not in resolved:
            resolved.append(value)
    return tuple(resolved), novel


def answer(doctor: DoctorAgent, instance: TaskInstance, backend: Backend,
           templates: TemplateSet, department_name: str | None = None,
           injected_principle: str | None = None, tag_prefix: str = "") -> Decision:
    """Retrieve, judge, build the prompt, call chat once, parse the choice."""
    bundle = prepare_prompt(doctor, instance, backend, templates,
                            department_name=department_name,
                            injected_principle=injected_principle,
                            tag_prefix=tag_prefix)
    output = backend.chat(bundle.request)
    chosen, novel = parse_answer(output, instance)
    return Decision(
        chosen=chosen,
        reasoning=output,
        retrieved_cases=bundle.cases,
        retrieved_experiences=bundle.experiences,
        novel=novel,
        prompt_text=bundle.prompt_text,
        question_text=bundle.question_text,
    )


def grade(decision: Decision, instance: TaskInstance) -> bool:
    """Examination: strict set equality; diagnosis/treatment: normalized
    equality with the singleton truth."""
    if instance.task == EXAMINATION:
        chosen = {normalize_answer(c) for c in decision.chosen}
        wanted = {normalize_answer(t) for t in instance.truth}
        return chosen == wanted
    if not decision.chosen:
        return False
    return normalize_answer(decision.chosen[0]) == normalize_answer(str(instance.truth))


def truth_text(instance: TaskInstance) -> str:
    if isinstance(instance.truth, frozenset):
        return ", ".join(sorted(instance.truth))
    return str(instance.truth)


# -- learning --------------------------------------------------------------------

def reflect(doctor: DoctorAgent, instance: TaskInstance, wrong_answer: str,
            backend: Backend, templates: TemplateSet) -> ExperiencePrinciple:
    """Compare the mistake with the truth and distill one candidate rule."""
    question = question_text_for(doctor, instance)
    prompt = templates.render(
        "reflect",
        question=question,
        wrong_answer=wrong_answer,
        correct_answer=truth_text(instance),
    )
    text = ""
    for _ in range(2):
        reply = backend.chat(user_request(prompt, tag="reflect"))
        match = re.search(r"principle\s*:\s*(.+)", reply, re.IGNORECASE | re.DOTALL)
        text = (match.group(1) if match else reply).strip()
        if text:
            break
    if not text:
        raise ReflectionParseError("reflection produced no rule text after retry")
    return ExperiencePrinciple(
        principle_id=0,
        task=instance.task,
        text=text,
        embedding=backend.embed(text),
        origin=Origin(
            question_text=question,
            wrong_answer=wrong_answer,
            correct_answer=truth_text(instance),
            candidates=instance.candidates,
        ),
        status=STATUS_CANDIDATE,
    )


def _instance_from_origin(task: str, origin: Origin) -> TaskInstance:
    truth: frozenset[str] | str
    if task == EXAMINATION:
        truth = frozenset(p.strip() for p in origin.correct_answer.split(",") if p.strip())
    else:
        truth = origin.correct_answer
    return TaskInstance(
        task=task,
        patient_view={"narrative": origin.question_text},
        candidates=origin.candidates,
        truth=truth,
        verify_truth_in_candidates=False,
    )


def _exemplar_instance(exemplar: ExemplarQA) -> TaskInstance:
    return TaskInstance(
        task=exemplar.task,
        patient_view={"narrative": exemplar.question_text},
        candidates=exemplar.candidates,
        truth=exemplar.answer if exemplar.task != EXAMINATION else frozenset([exemplar.answer]),
        verify_truth_in_candidates=False,
    )


def _validation_outcome(doctor: DoctorAgent, principle_text: str, task: str,
                        origin_instance: TaskInstance, backend: Backend,
                        templates: TemplateSet) -> bool:
    """True if the candidate rule fixes its origin and does not regress the
    exemplar set. Decides only; touches no stored state."""
    cfg = doctor.config
    exemplars = doctor.exemplar_pool[task][-cfg.validation_exemplars:] \
        if cfg.validation_exemplars > 0 else []
    if cfg.validate_origin_retry:
        retry = answer(doctor, origin_instance, backend, templates,
                       injected_principle=principle_text, tag_prefix="validate:")
        if not grade(retry, origin_instance):
            return False
    if cfg.validate_exemplar_check and exemplars:
        baseline = 0
        with_rule = 0
        for exemplar in exemplars:
            inst = _exemplar_instance(exemplar)
            base_decision = answer(doctor, inst, backend, templates,
                                   tag_prefix="validate:")
            baseline += grade(base_decision, inst)
            rule_decision = answer(doctor, inst, backend, templates,
                                   injected_principle=principle_text,
                                   tag_prefix="validate:")
            with_rule += grade(rule_decision, inst)
        if with_rule < baseline:
            return False
    return True


def validate_principle(doctor: DoctorAgent, principle: ExperiencePrinciple,
                       origin_instance: TaskInstance, backend: Backend,
                       templates: TemplateSet) -> str:
    """Run the validation gate and set the principle status exactly once.
    Backend failures propagate with the status still `candidate`."""
    if principle.status != STATUS_CANDIDATE:
        return principle.status
    ok = _validation_outcome(doctor, principle.text, principle.task,
                             origin_instance, backend, templates)
    principle.status = STATUS_VALIDATED if ok else STATUS_DISCARDED
    return principle.status


def learn_from_outcome(doctor: DoctorAgent, instance: TaskInstance,
                       decision: Decision, backend: Backend,
                       templates: TemplateSet,
                       correct: bool | None = None) -> LearningEvent:
    """Success appends the question/answer pair to the task's case base;
    failure runs reflect -> validate and stores the principle with its final
    status (discarded principles are kept for audit, never retrieved)."""
    if correct is None:
        correct = grade(decision, instance)
    task = instance.task
    if correct:
        question = decision.question_text or question_text_for(doctor, instance)
        case = MedicalCase(
            case_id=0,
            task=task,
            question_text=question,
            answer_text=truth_text(instance),
            embedding=backend.embed(question),
        )
        case_id = doctor.case_bases[task].add_case(case, encoder_name=backend.encoder_name)
        return LearningEvent(kind="case_added", task=task, case_id=case_id)

    wrong = ", ".join(decision.chosen) if decision.chosen else "(no answer)"
    principle = reflect(doctor, instance, wrong, backend, templates)
    status = validate_principle(doctor, principle, instance, backend, templates)
    principle_id = doctor.experience_bases[task].add_experience(
        principle, encoder_name=backend.encoder_name
    )
    kind = "principle_validated" if status == STATUS_VALIDATED else "principle_discarded"
    return LearningEvent(kind=kind, task=task, principle_id=principle_id)


def refine_experience(doctor: DoctorAgent, task: str, format_examples: str,
                      backend: Backend, templates: TemplateSet) -> int:
    """Rewrite every validated, unrefined principle against the format
    examples and keep the rewrite only if it re-passes validation. Returns
    the number of principles whose text was replaced; idempotent."""
    count = 0
    for principle in doctor.experience_bases[task].entries:
        if principle.status != STATUS_VALIDATED or principle.refined:
            continue
        prompt = templates.render("refine", format_examples=format_examples,
                                  principle_text=principle.text)
        reply = backend.chat(user_request(prompt, tag="refine"))
        match = re.search(r"principle\s*:\s*(.+)", reply, re.IGNORECASE | re.DOTALL)
        new_text = (match.group(1) if match else reply).strip()
        origin_instance = _instance_from_origin(task, principle.origin)
        if new_text and _validation_outcome(doctor, new_text, task, origin_instance,
                                            backend, templates):
            principle.text = new_text
            principle.embedding = backend.embed(new_text)
            principle.refined = True
            count += 1
        else:
            principle.refined = True
            principle.note = "refinement rejected; original text retained"
    return count


# -- book reading ----------------------------------------------------------------

@dataclass
class BookReport:
    cases_added: int = 0
    items_skipped: int = 0
    case_ids: dict[str, list[int]] = field(default_factory=dict)


_OPTION_SPLIT_RE = re.compile(r"\s*\|\s*|\n")
_OPTION_RE = re.compile(r"^\s*([A-Z])\)\s*(.+?)\s*$")


def _parse_book_items(reply: str) -> list[dict]:
    items = []
    for block in re.split(r"^\s*---\s*$", reply, flags=re.MULTILINE):
        fields: dict[str, str] = {}
        for line in block.splitlines():
            if ":" in line:
                key, _, value = line.partition(":")
                key = key.strip().casefold()
                if key in ("task", "question", "options", "answer") and key not in fields:
                    fields[key] = value.strip()
        if fields:
            items.append(fields)
    return items


def read_books(doctor: DoctorAgent, documents: list[str], backend: Backend,
               templates: TemplateSet) -> BookReport:
    """Convert each document into multi-choice items; well-formed items are
    stored as book-sourced cases and added to the exemplar pool; malformed
    items are skipped and counted."""
    if not documents:
        raise ValueError("documents must be non-empty")
    report = BookReport(case_ids={task: [] for task in TASKS})
    for document in documents:
        prompt = templates.render("read_books", document=document)
        reply = backend.chat(user_request(prompt, tag="read-books"))
        for item in _parse_book_items(reply):
            parsed = _item_to_case(item)
            if parsed is None:
                report.items_skipped += 1
                continue
            task, question_text, candidates, answer_text = parsed
            case = MedicalCase(
                case_id=0,
                task=task,
                question_text=question_text,
                answer_text=answer_text,
                embedding=backend.embed(question_text),
                source=SOURCE_BOOK,
            )
            case_id = doctor.case_bases[task].add_case(
                case, encoder_name=backend.encoder_name
            )
            doctor.exemplar_pool[task].append(
                ExemplarQA(task=task, question_text=question_text,
                           candidates=candidates, answer=answer_text)
            )
            report.cases_added += 1
            report.case_ids[task].append(case_id)
    return report


def _item_to_case(item: dict) -> tuple[str, str, tuple[str, ...], str] | None:
    task = item.get("task", "").strip().casefold()
    question = item.get("question", "").strip()
    options_raw = item.get("options", "")
    answer_label = item.get("answer", "").strip().upper().rstrip(")")
    if task not in TASKS or not question or not options_raw or not answer_label:
        return None
    options: dict[str, str] = {}
    for piece in _OPTION_SPLIT_RE.split(options_raw):
        match = _OPTION_RE.match(piece.strip())
        if match:
            options[match.group(1)] = match.group(2)
    if answer_label not in options or len(options) < 2:
        return None
    labels = sorted(options)
    candidates = tuple(options[l] for l in labels)
    question_text = question + "\nOptions:\n" + "\n".join(
        f"{l}) {options[l]}" for l in labels
    )
    return task, question_text, candidates, options[answer_label]
