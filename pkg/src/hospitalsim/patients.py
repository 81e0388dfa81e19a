"""Patient agent generation.

Two generators share one record shape: a four-stage chat pipeline (basic
info, history, symptoms, examination reports, each stage conditioned on the
previous ones and on the disease knowledge) and a free, deterministic
template sampler that draws the same information directly from the
knowledge base. Every record must pass the quality-control gate before it
leaves the factory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import GenerationParseError, QcExhaustedError, UnknownDiseaseError
from .knowledge import DiseaseKnowledge, KnowledgeBase
from .llm import Backend, user_request
from .templates import TemplateSet

logger = logging.getLogger(__name__)

FIRST_NAMES = (
    "Alice", "Brian", "Carmen", "Derek", "Elena", "Felix", "Grace", "Hassan",
    "Irene", "Jonas", "Keiko", "Liam", "Mona", "Nadia", "Oscar", "Priya",
    "Quentin", "Rosa", "Samuel", "Tara", "Umar", "Vera", "Wendell", "Ximena",
    "Yusuf", "Zoe",
)
LAST_NAMES = (
    "Abbott", "Barnes", "Castillo", "Diallo", "Eriksen", "Fujimoto", "Garza",
    "Haddad", "Ivanova", "Jensen", "Kaur", "Lindqvist", "Moreau", "Novak",
    "Okafor", "Petrov", "Quinn", "Rahman", "Santos", "Takahashi", "Ueda",
    "Vargas", "Weiss", "Xu", "Yamada", "Zhang",
)
GENDERS = ("male", "female")


@dataclass(frozen=True)
class Truth:
    disease_id: str
    severity: str


@dataclass
class PatientRecord:
    patient_id: str
    name: str
    gender: str
    age: int
    medical_history: list[str]
    symptoms: list[str]
    examination_reports: dict[str, str]
    truth: Truth
    created_by: str = "template"  # llm | template

    def doctor_view(self, include_reports: bool = False) -> dict:
        """Doctor-visible fields only; the hidden truth never leaves here."""
        view = {
            "patient_id": self.patient_id,
            "name": self.name,
            "gender": self.gender,
            "age": self.age,
            "medical_history": list(self.medical_history),
            "symptoms": list(self.symptoms),
        }
        if include_reports:
            view["examination_reports"] = dict(self.examination_reports)
        return view

    def visible_json(self) -> str:
        view = self.doctor_view(include_reports=True)
        view["created_by"] = self.created_by
        return json.dumps(view, sort_keys=True)


@dataclass
class CohortSpec:
    department_id: str
    disease_weights: dict[str, float]
    size: int
    seed: int
    age_range: tuple[int, int] | None = None
    gender_mix: dict[str, float] | None = None

    def __post_init__(self):
        if self.size < 0:
            raise ValueError("size must be >= 0")
        if self.size and (not self.disease_weights or sum(self.disease_weights.values()) <= 0):
            raise ValueError("disease_weights must have positive total weight")
        for weight in self.disease_weights.values():
            if weight < 0:
                raise ValueError("disease weights must be non-negative")


@dataclass
class QcVerdict:
    passed: bool
    violations: list[tuple[str, str]] = field(default_factory=list)


# -- quality control -----------------------------------------------------------

def _normalize(text: str) -> str:
    return " ".join(text.casefold().split())


def _symptom_overlaps(reported: str, vocabulary: tuple[str, ...]) -> bool:
    norm = _normalize(reported)
    for known in vocabulary:
        known_norm = _normalize(known)
        if known_norm in norm or norm in known_norm:
            return True
    return False


def quality_check(record: PatientRecord, kb: KnowledgeBase,
                  backend: Backend | None = None,
                  templates: TemplateSet | None = None) -> QcVerdict:
    """Rules-only checks always run; a judge chat call is added when a
    backend is supplied (its transport failures propagate, they are never
    silently downgraded to rules-only)."""
    disease = kb.disease(record.truth.disease_id)
    violations: list[tuple[str, str]] = []
    if not (0 <= record.age <= 120):
        violations.append(("age_gender_sane", f"age {record.age} outside [0, 120]"))
    if record.gender not in GENDERS:
        violations.append(("age_gender_sane", f"gender {record.gender!r} not recognized"))
    if not record.symptoms:
        violations.append(("symptom_overlap", "record reports no symptoms"))
    elif not any(_symptom_overlaps(s, disease.symptoms) for s in record.symptoms):
        violations.append(
            ("symptom_overlap", "no reported symptom appears in the disease vocabulary")
        )
    for modality in record.examination_reports:
        if modality not in disease.examinations:
            violations.append(
                ("examination_known", f"modality {modality!r} not defined for the disease")
            )
    if backend is not None:
        templates = templates or _default_templates()
        record_block = record.visible_json()
        disease_block = json.dumps(
            {"symptoms": list(disease.symptoms), "examinations": sorted(disease.examinations)},
            sort_keys=True,
        )
        prompt = templates.render("qc_judge", record_block=record_block,
                                  disease_block=disease_block)
        reply = backend.chat(user_request(prompt, tag="qc"))
        match = re.search(r"verdict\s*:\s*(pass|fail)", reply, re.IGNORECASE)
        if match is None or match.group(1).lower() != "pass":
            violations.append(("judge", f"judge did not pass the record: {reply.strip()[:120]}"))
    return QcVerdict(passed=not violations, violations=violations)


def _default_templates() -> TemplateSet:
    from .templates import default_templates

    return default_templates()


# -- template (LLM-free) generator ---------------------------------------------

def _patient_rng(seed: int | str, disease_id: str) -> random.Random:
    return random.Random(f"{seed}:{disease_id}")


def template_generate_patient(kb: KnowledgeBase, disease_id: str, seed: int | str,
                              patient_id: str | None = None,
                              age_range: tuple[int, int] | None = None,
                              gender: str | None = None) -> PatientRecord:
    """Deterministic generator that samples the record straight from the
    disease knowledge. Draw order is fixed and documented:

      rng = Random(f"{seed}:{disease_id}")
      1. age    = rng.randint(lo, hi)            (default 18..85)
      2. gender = rng.choice(GENDERS)            (skipped when forced)
      3. name   = rng.choice(FIRST) + rng.choice(LAST)
      4. k_hist = rng.randint(0, min(2, len(risk_factors)));
         history = rng.sample(risk_factors, k_hist)
      5. k_sym  = rng.randint(2, min(5, len(symptoms)));
         symptoms = rng.sample(symptoms, k_sym)  (whole list if fewer than 2)
      6. severity = rng.choice(sorted(treatment_plans))
      7. examination reports = the disease findings text, verbatim
    """
    disease = kb.disease(disease_id)
    rng = _patient_rng(seed, disease_id)
    lo, hi = age_range or (18, 85)
    age = rng.randint(lo, hi)
    drawn_gender = rng.choice(GENDERS)
    if gender is None:
        gender = drawn_gender
    name = f"{rng.choice(FIRST_NAMES)} {rng.choice(LAST_NAMES)}"
    k_hist = rng.randint(0, min(2, len(disease.risk_factors)))
    history = rng.sample(list(disease.risk_factors), k_hist)
    if len(disease.symptoms) < 2:
        symptoms = list(disease.symptoms)
    else:
        k_sym = rng.randint(2, min(5, len(disease.symptoms)))
        symptoms = rng.sample(list(disease.symptoms), k_sym)
    severity = rng.choice(sorted(disease.treatment_plans))
    return PatientRecord(
        patient_id=patient_id or f"pat-{hashlib.sha1(f'{seed}:{disease_id}'.encode()).hexdigest()[:8]}",
        name=name,
        gender=gender,
        age=age,
        medical_history=history,
        symptoms=symptoms,
        examination_reports=dict(disease.examinations),
        truth=Truth(disease_id=disease_id, severity=severity),
        created_by="template",
    )


# -- four-stage chat generator ---------------------------------------------------

_FENCE_RE = re.compile(r"```(?:[a-z]*\n)?(.*?)```", re.DOTALL)


def _parse_block(reply: str, stage: str) -> dict[str, str]:
    match = _FENCE_RE.search(reply)
    body = match.group(1) if match else reply
    fields: dict[str, str] = {}
    for line in body.splitlines():
        if ":" in line:
            key, _, value = line.partition(":")
            key = key.strip().casefold()
            if key:
                fields[key.strip()] = value.strip()
    if not fields:
        raise GenerationParseError(f"stage {stage!r}: no key: value lines in output")
    return fields


def _split_list(raw: str) -> list[str]:
    items = [piece.strip() for piece in re.split(r"[;\n]|,(?![^()]*\))", raw)]
    return [item for item in items if item and item.casefold() != "none"]


def _risk_factor_text(disease: DiseaseKnowledge) -> str:
    if not disease.risk_factors:
        return "- no specific predispositions are known for this condition"
    return "\n".join(f"- {fact}" for fact in disease.risk_factors)


def generate_patient(kb: KnowledgeBase, disease_id: str, backend: Backend,
                     seed: int | str, templates: TemplateSet,
                     patient_id: str | None = None,
                     qc_retries: int = 3,
                     qc_backend: Backend | None = None) -> PatientRecord:
    """Run the four sequential generation stages against `backend`, parse
    each stage, and gate the result through quality_check. Retries the whole
    pipeline up to `qc_retries` times before giving up."""
    disease = kb.disease(disease_id)
    rng = _patient_rng(seed, disease_id)
    severity = rng.choice(sorted(disease.treatment_plans))
    last_verdict: QcVerdict | None = None
    for attempt in range(qc_retries):
        record = _generate_once(kb, disease, backend, templates, severity,
                                patient_id or f"pat-llm-{seed}", attempt)
        verdict = quality_check(record, kb, backend=qc_backend)
        if verdict.passed:
            return record
        last_verdict = verdict
        logger.warning("generated record failed QC (attempt %d): %s",
                       attempt + 1, verdict.violations)
    raise QcExhaustedError(
        f"no QC-passing record for {disease_id!r} within {qc_retries} attempts: "
        f"{last_verdict.violations if last_verdict else []}"
    )


def _generate_once(kb: KnowledgeBase, disease: DiseaseKnowledge, backend: Backend,
                   templates: TemplateSet, severity: str, patient_id: str,
                   attempt: int) -> PatientRecord:
    risk_text = _risk_factor_text(disease)
    basic = _parse_block(
        backend.chat(user_request(
            templates.render("gen_basic", disease_name=disease.name, risk_factors=risk_text),
            tag="gen-basic",
        )),
        "gen-basic",
    )
    name = basic.get("name", "").strip()
    gender = basic.get("gender", "").strip().casefold()
    try:
        age = int(re.sub(r"[^\d]", "", basic.get("age", "")) or "-1")
    except ValueError:
        raise GenerationParseError("gen-basic: unparseable age")
    if not name or not gender:
        raise GenerationParseError("gen-basic: missing name or gender")

    history_block = _parse_block(
        backend.chat(user_request(
            templates.render("gen_history", name=name, gender=gender, age=str(age),
                             disease_name=disease.name, risk_factors=risk_text),
            tag="gen-history",
        )),
        "gen-history",
    )
    history = _split_list(history_block.get("history", ""))

    symptoms_block = _parse_block(
        backend.chat(user_request(
            templates.render(
                "gen_symptoms", name=name, gender=gender, age=str(age),
                history="; ".join(history) or "none",
                disease_name=disease.name,
                symptom_vocabulary="\n".join(f"- {s}" for s in disease.symptoms),
            ),
            tag="gen-symptoms",
        )),
        "gen-symptoms",
    )
    symptoms = _split_list(symptoms_block.get("symptoms", ""))
    if not symptoms:
        raise GenerationParseError("gen-symptoms: empty symptom list")

    exam_lines = "\n".join(f"{m}: <report text>" for m in disease.examinations)
    findings = "\n".join(f"- {m}: {text}" for m, text in disease.examinations.items())
    exams_block = _parse_block(
        backend.chat(user_request(
            templates.render(
                "gen_exams", name=name, symptoms="; ".join(symptoms),
                disease_name=disease.name, severity=severity,
                examination_findings=findings, examination_lines=exam_lines,
            ),
            tag="gen-exams",
        )),
        "gen-exams",
    )
    reports = {}
    lowered = {m.casefold(): m for m in disease.examinations}
    for key, value in exams_block.items():
        if key in lowered and value:
            reports[lowered[key]] = value
    if not reports:
        raise GenerationParseError("gen-exams: no known examination line in output")

    return PatientRecord(
        patient_id=patient_id if attempt == 0 else f"{patient_id}-r{attempt}",
        name=name,
        gender=gender,
        age=age,
        medical_history=history,
        symptoms=symptoms,
        examination_reports=reports,
        truth=Truth(disease_id=disease.disease_id, severity=severity),
        created_by="llm",
    )


# -- cohorts -------------------------------------------------------------------

@dataclass
class Cohort:
    records: list[PatientRecord]

    def __len__(self) -> int:
        return len(self.records)

    def truths(self) -> dict[str, Truth]:
        return {r.patient_id: r.truth for r in self.records}

    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for record in self.records:
            digest.update(record.visible_json().encode("utf-8"))
            digest.update(b"\n")
        return digest.hexdigest()

    def record_hashes(self) -> list[str]:
        return [
            hashlib.sha256(r.visible_json().encode("utf-8")).hexdigest()
            for r in self.records
        ]

    def save(self, path: str | Path) -> tuple[Path, Path]:
        """Write the doctor-visible stream and the hidden-truth sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        sidecar = path.with_suffix(path.suffix + ".truth")
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(record.visible_json() + "\n")
        with open(sidecar, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(
                    {
                        "patient_id": record.patient_id,
                        "disease_id": record.truth.disease_id,
                        "severity": record.truth.severity,
                    },
                    sort_keys=True,
                ) + "\n")
        return path, sidecar

    @classmethod
    def load(cls, path: str | Path) -> "Cohort":
        path = Path(path)
        sidecar = path.with_suffix(path.suffix + ".truth")
        truths: dict[str, Truth] = {}
        with open(sidecar, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                truths[rec["patient_id"]] = Truth(rec["disease_id"], rec["severity"])
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                records.append(PatientRecord(
                    patient_id=rec["patient_id"],
                    name=rec["name"],
                    gender=rec["gender"],
                    age=rec["age"],
                    medical_history=rec["medical_history"],
                    symptoms=rec["symptoms"],
                    examination_reports=rec["examination_reports"],
                    truth=truths[rec["patient_id"]],
                    created_by=rec.get("created_by", "template"),
                ))
        return cls(records)


def sample_cohort(kb: KnowledgeBase, spec: CohortSpec,
                  backend: Backend | None = None,
                  templates: TemplateSet | None = None,
                  qc_backend: Backend | None = None) -> Cohort:
    """Generate `spec.size` QC-passed records with the disease multiset drawn
    from `spec.disease_weights` (deterministic given the seed). With no
    backend the template generator is used."""
    kb.department(spec.department_id)
    department_ids = {d.disease_id for d in kb.diseases
                      if d.department_id == spec.department_id}
    for disease_id in spec.disease_weights:
        if disease_id not in department_ids:
            raise UnknownDiseaseError(
                f"disease {disease_id!r} is not treated in {spec.department_id!r}"
            )
    rng = random.Random(f"cohort:{spec.seed}")
    disease_ids = sorted(spec.disease_weights)
    weights = [spec.disease_weights[d] for d in disease_ids]
    draws = rng.choices(disease_ids, weights=weights, k=spec.size) if spec.size else []

    gender_plan: list[str | None] = [None] * spec.size
    if spec.gender_mix:
        genders = sorted(spec.gender_mix)
        gender_plan = rng.choices(
            genders, weights=[spec.gender_mix[g] for g in genders], k=spec.size
        )

    records: list[PatientRecord] = []
    for index, disease_id in enumerate(draws):
        patient_id = f"pat-{spec.seed}-{index:05d}"
        try:
            if backend is None:
                record = template_generate_patient(
                    kb, disease_id, seed=f"{spec.seed}:{index}", patient_id=patient_id,
                    age_range=spec.age_range, gender=gender_plan[index],
                )
                verdict = quality_check(record, kb)
                if not verdict.passed:
                    raise QcExhaustedError(f"template record failed QC: {verdict.violations}")
            else:
                record = generate_patient(
                    kb, disease_id, backend, seed=f"{spec.seed}:{index}",
                    templates=templates or _default_templates(),
                    patient_id=patient_id, qc_backend=qc_backend,
                )
        except Exception as exc:
            exc.args = (f"patient index {index}: {exc}",)
            raise
        records.append(record)
    return Cohort(records)
