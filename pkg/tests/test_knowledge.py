import pytest
import yaml

from hospitalsim.errors import (
    DuplicateIdError,
    KnowledgeParseError,
    ReferentialError,
    UnknownDepartmentError,
    UnknownDiseaseError,
)
from hospitalsim.knowledge import (
    diseases_for_department,
    ground_truth_for,
    load_knowledge_base,
    serialize_knowledge_base,
)


def test_tiny_bundle_round_trip(tiny_kb, tmp_path):
    assert len(tiny_kb.diseases) == 3
    assert tiny_kb.candidate_diseases["respiratory"] == ("COVID-19", "Influenza B")
    assert set(tiny_kb.candidate_examinations["respiratory"]) == {
        "Blood Test", "Chest X-ray Exam", "Rapid Antigen Test",
    }
    # load -> serialize -> load is identity on the in-memory representation
    dump = serialize_knowledge_base(tiny_kb)
    path = tmp_path / "round.yaml"
    path.write_text(yaml.safe_dump(dump), encoding="utf-8")
    reloaded = load_knowledge_base(path)
    assert serialize_knowledge_base(reloaded) == dump


def test_dangling_department_reference(tmp_path):
    bundle = {
        "schema_version": 1,
        "departments": [{"id": "neurology", "name": "Neurology", "kind": "clinical"}],
        "diseases": [{
            "disease_id": "x", "name": "X", "department_id": "Cardiology",
            "symptoms": ["a", "b"], "examinations": {"E": "f"},
            "treatment_plans": {"default": "p"},
        }],
    }
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(bundle), encoding="utf-8")
    with pytest.raises(ReferentialError, match="Cardiology"):
        load_knowledge_base(path)


def test_duplicate_disease_id(tmp_path):
    disease = {
        "disease_id": "x", "name": "X", "department_id": "d",
        "symptoms": ["a"], "examinations": {"E": "f"}, "treatment_plans": {"default": "p"},
    }
    bundle = {
        "schema_version": 1,
        "departments": [{"id": "d", "name": "D", "kind": "clinical"}],
        "diseases": [disease, dict(disease)],
    }
    path = tmp_path / "dup.yaml"
    path.write_text(yaml.safe_dump(bundle), encoding="utf-8")
    with pytest.raises(DuplicateIdError):
        load_knowledge_base(path)


def test_parse_error_carries_file_and_line(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("schema_version: 1\ndepartments: [\n", encoding="utf-8")
    with pytest.raises(KnowledgeParseError) as err:
        load_knowledge_base(path)
    assert "broken.yaml" in str(err.value)


def test_schema_version_rejected(tmp_path):
    path = tmp_path / "v99.yaml"
    path.write_text("schema_version: 99\ndepartments: []\n", encoding="utf-8")
    with pytest.raises(KnowledgeParseError, match="schema_version"):
        load_knowledge_base(path)


def test_default_taxonomy_counts(default_kb):
    clinical = [d for d in default_kb.departments if d.kind == "clinical"]
    non_clinical = [d for d in default_kb.departments if d.kind == "non_clinical"]
    assert len(clinical) == 21
    assert len(non_clinical) == 11


def test_diseases_for_department(tiny_kb, default_kb):
    names = [d.name for d in diseases_for_department(tiny_kb, "respiratory")]
    assert names == ["COVID-19", "Influenza B"]  # stable load order
    assert diseases_for_department(tiny_kb, "anatomy") == []
    derm = [d.name for d in diseases_for_department(default_kb, "dermatology")]
    assert "Herpes Zoster" in derm
    with pytest.raises(UnknownDepartmentError):
        diseases_for_department(tiny_kb, "unicornology")


def test_membership_property(default_kb):
    for disease in default_kb.diseases:
        assert disease in diseases_for_department(default_kb, disease.department_id)


def test_ground_truth_projection(default_kb, tiny_kb):
    truth = ground_truth_for(default_kb, "covid_19")
    assert truth.correct_examinations == frozenset({"Blood Test", "Chest X-ray Exam"})
    assert truth.correct_diagnosis == "COVID-19"
    assert set(truth.correct_treatments) == {"mild", "moderate", "severe"}

    single = ground_truth_for(tiny_kb, "influenza_b")
    assert single.correct_examinations == frozenset({"Rapid Antigen Test"})

    with pytest.raises(UnknownDiseaseError):
        ground_truth_for(tiny_kb, "X999")


def test_diagnosis_answer_space_contains_truth(default_kb):
    for disease in default_kb.diseases:
        truth = ground_truth_for(default_kb, disease.disease_id)
        assert truth.correct_diagnosis == disease.name
        assert disease.name in default_kb.candidate_diseases[disease.department_id]


def test_extra_candidates_section(tmp_path):
    bundle = {
        "schema_version": 1,
        "departments": [{"id": "d", "name": "D", "kind": "clinical"}],
        "diseases": [{
            "disease_id": "x", "name": "X", "department_id": "d",
            "symptoms": ["a", "b"], "examinations": {"E": "f"},
            "treatment_plans": {"default": "p"},
        }],
        "extra_candidates": {"d": {"examinations": ["MRI"], "diseases": ["Y"]}},
    }
    path = tmp_path / "extra.yaml"
    path.write_text(yaml.safe_dump(bundle), encoding="utf-8")
    kb = load_knowledge_base(path)
    assert kb.candidate_examinations["d"] == ("E", "MRI")
    assert kb.candidate_diseases["d"] == ("X", "Y")
