"""Department taxonomy and disease knowledge base.

Knowledge bundles are human-editable YAML: either a directory with
`departments.yaml` plus one `diseases/<disease_id>.yaml` per disease, or a
single file carrying both sections. The loaded KnowledgeBase is immutable
and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import (
    DuplicateIdError,
    KnowledgeParseError,
    ReferentialError,
    UnknownDepartmentError,
    UnknownDiseaseError,
)

SCHEMA_VERSION = 1
SEVERITY_LEVELS = ("mild", "moderate", "severe", "default")

CLINICAL = "clinical"
NON_CLINICAL = "non_clinical"


@dataclass(frozen=True)
class Department:
    id: str
    name: str
    kind: str  # clinical | non_clinical


@dataclass(frozen=True)
class DiseaseKnowledge:
    disease_id: str
    name: str
    department_id: str
    risk_factors: tuple[str, ...]
    symptoms: tuple[str, ...]
    examinations: dict[str, str]  # modality -> expected findings
    treatment_plans: dict[str, str]  # severity -> plan text

    def severities(self) -> tuple[str, ...]:
        return tuple(sorted(self.treatment_plans))


@dataclass(frozen=True)
class KnowledgeBase:
    departments: tuple[Department, ...]
    diseases: tuple[DiseaseKnowledge, ...]
    candidate_examinations: dict[str, tuple[str, ...]]  # dept id -> modalities
    candidate_diseases: dict[str, tuple[str, ...]]  # dept id -> disease names
    _dept_index: dict[str, Department] = field(default_factory=dict, repr=False)
    _disease_index: dict[str, DiseaseKnowledge] = field(default_factory=dict, repr=False)

    def department(self, dept_id: str) -> Department:
        try:
            return self._dept_index[dept_id]
        except KeyError:
            raise UnknownDepartmentError(f"unknown department {dept_id!r}") from None

    def disease(self, disease_id: str) -> DiseaseKnowledge:
        try:
            return self._disease_index[disease_id]
        except KeyError:
            raise UnknownDiseaseError(f"unknown disease {disease_id!r}") from None

    def clinical_departments(self) -> tuple[Department, ...]:
        return tuple(d for d in self.departments if d.kind == CLINICAL)

    def disease_by_name(self, name: str) -> DiseaseKnowledge | None:
        wanted = name.strip().casefold()
        for d in self.diseases:
            if d.name.casefold() == wanted:
                return d
        return None


def _parse_yaml(path: Path) -> dict:
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise KnowledgeParseError(path, line, str(exc.problem)) from exc
    except yaml.YAMLError as exc:
        raise KnowledgeParseError(path, None, str(exc)) from exc
    if not isinstance(data, dict):
        raise KnowledgeParseError(path, 1, "expected a mapping at top level")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise KnowledgeParseError(
            path, 1, f"schema_version {version!r} not supported (expected {SCHEMA_VERSION})"
        )
    return data


def _require(data: dict, key: str, path: Path):
    if key not in data:
        raise KnowledgeParseError(path, None, f"missing required field {key!r}")
    return data[key]


def _parse_departments(data: dict, path: Path) -> list[Department]:
    departments = []
    for entry in _require(data, "departments", path):
        dept = Department(
            id=str(_require(entry, "id", path)),
            name=str(_require(entry, "name", path)),
            kind=str(_require(entry, "kind", path)),
        )
        if dept.kind not in (CLINICAL, NON_CLINICAL):
            raise KnowledgeParseError(path, None, f"department {dept.id}: bad kind {dept.kind!r}")
        departments.append(dept)
    return departments


def _parse_disease(data: dict, path: Path) -> DiseaseKnowledge:
    disease = DiseaseKnowledge(
        disease_id=str(_require(data, "disease_id", path)),
        name=str(_require(data, "name", path)),
        department_id=str(_require(data, "department_id", path)),
        risk_factors=tuple(str(s) for s in data.get("risk_factors", []) or []),
        symptoms=tuple(str(s) for s in _require(data, "symptoms", path)),
        examinations={str(k): str(v) for k, v in _require(data, "examinations", path).items()},
        treatment_plans={
            str(k): str(v) for k, v in _require(data, "treatment_plans", path).items()
        },
    )
    if not disease.symptoms:
        raise KnowledgeParseError(path, None, f"disease {disease.disease_id}: symptoms empty")
    if not disease.examinations:
        raise KnowledgeParseError(path, None, f"disease {disease.disease_id}: no examinations")
    if not disease.treatment_plans:
        raise KnowledgeParseError(path, None, f"disease {disease.disease_id}: no treatment plans")
    for severity in disease.treatment_plans:
        if severity not in SEVERITY_LEVELS:
            raise KnowledgeParseError(
                path, None,
                f"disease {disease.disease_id}: severity {severity!r} not one of {SEVERITY_LEVELS}",
            )
    return disease


def _assemble(departments: list[Department], diseases: list[DiseaseKnowledge],
              extra_candidates: dict | None) -> KnowledgeBase:
    dept_index: dict[str, Department] = {}
    for dept in departments:
        if dept.id in dept_index:
            raise DuplicateIdError(f"duplicate department id {dept.id!r}")
        dept_index[dept.id] = dept

    disease_index: dict[str, DiseaseKnowledge] = {}
    for disease in diseases:
        if disease.disease_id in disease_index:
            raise DuplicateIdError(f"duplicate disease id {disease.disease_id!r}")
        dept = dept_index.get(disease.department_id)
        if dept is None:
            raise ReferentialError(
                f"disease {disease.disease_id!r} references unknown department "
                f"{disease.department_id!r}"
            )
        if dept.kind != CLINICAL:
            raise ReferentialError(
                f"disease {disease.disease_id!r} references non-clinical department "
                f"{disease.department_id!r}"
            )
        disease_index[disease.disease_id] = disease

    # Candidate answer spaces, derived per department in load order, then
    # extended by the optional explicit section.
    cand_exams: dict[str, list[str]] = {d.id: [] for d in departments}
    cand_diseases: dict[str, list[str]] = {d.id: [] for d in departments}
    for disease in diseases:
        for modality in disease.examinations:
            if modality not in cand_exams[disease.department_id]:
                cand_exams[disease.department_id].append(modality)
        if disease.name not in cand_diseases[disease.department_id]:
            cand_diseases[disease.department_id].append(disease.name)
    for dept_id, extra in (extra_candidates or {}).items():
        if dept_id not in dept_index:
            raise ReferentialError(f"extra_candidates references unknown department {dept_id!r}")
        for modality in extra.get("examinations", []) or []:
            if modality not in cand_exams[dept_id]:
                cand_exams[dept_id].append(str(modality))
        for name in extra.get("diseases", []) or []:
            if name not in cand_diseases[dept_id]:
                cand_diseases[dept_id].append(str(name))

    return KnowledgeBase(
        departments=tuple(departments),
        diseases=tuple(diseases),
        candidate_examinations={k: tuple(v) for k, v in cand_exams.items()},
        candidate_diseases={k: tuple(v) for k, v in cand_diseases.items()},
        _dept_index=dept_index,
        _disease_index=disease_index,
    )


def load_knowledge_base(path: str | Path) -> KnowledgeBase:
    """Load a bundle directory or a single-file bundle and verify every
    cross-reference."""
    path = Path(path)
    if path.is_dir():
        dept_file = path / "departments.yaml"
        if not dept_file.exists():
            raise KnowledgeParseError(dept_file, None, "file not found")
        dept_data = _parse_yaml(dept_file)
        departments = _parse_departments(dept_data, dept_file)
        diseases = []
        disease_dir = path / "diseases"
        if disease_dir.is_dir():
            for disease_file in sorted(disease_dir.glob("*.yaml")):
                diseases.append(_parse_disease(_parse_yaml(disease_file), disease_file))
        extra = dept_data.get("extra_candidates")
    else:
        if not path.exists():
            raise KnowledgeParseError(path, None, "file not found")
        data = _parse_yaml(path)
        departments = _parse_departments(data, path)
        diseases = [_parse_disease(entry, path) for entry in data.get("diseases", []) or []]
        extra = data.get("extra_candidates")
    return _assemble(departments, diseases, extra)


def default_knowledge_path() -> Path:
    """Path of the knowledge bundle shipped with the package."""
    return Path(__file__).parent / "data" / "knowledge"


def load_default_knowledge() -> KnowledgeBase:
    return load_knowledge_base(default_knowledge_path())


def diseases_for_department(kb: KnowledgeBase, dept_id: str) -> list[DiseaseKnowledge]:
    """All diseases treated in `dept_id`, in stable load order. Non-clinical
    departments carry no diseases by construction."""
    kb.department(dept_id)
    return [d for d in kb.diseases if d.department_id == dept_id]


@dataclass(frozen=True)
class GroundTruth:
    correct_examinations: frozenset[str]
    correct_diagnosis: str
    correct_treatments: dict[str, str]


def ground_truth_for(kb: KnowledgeBase, disease_id: str) -> GroundTruth:
    """Projection of a disease record used by the grader."""
    disease = kb.disease(disease_id)
    return GroundTruth(
        correct_examinations=frozenset(disease.examinations),
        correct_diagnosis=disease.name,
        correct_treatments=dict(disease.treatment_plans),
    )


def serialize_knowledge_base(kb: KnowledgeBase) -> dict:
    """Single-file bundle form of a loaded base (used for round-trip checks)."""
    return {
        "schema_version": SCHEMA_VERSION,
        "departments": [
            {"id": d.id, "name": d.name, "kind": d.kind} for d in kb.departments
        ],
        "diseases": [
            {
                "disease_id": d.disease_id,
                "name": d.name,
                "department_id": d.department_id,
                "risk_factors": list(d.risk_factors),
                "symptoms": list(d.symptoms),
                "examinations": dict(d.examinations),
                "treatment_plans": dict(d.treatment_plans),
            }
            for d in kb.diseases
        ],
    }
