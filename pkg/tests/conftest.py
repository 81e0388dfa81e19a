from __future__ import annotations

import re

import pytest

from hospitalsim.knowledge import ground_truth_for, load_default_knowledge, load_knowledge_base
from hospitalsim.llm import MockBackend, MockRule
from hospitalsim.memory import STATUS_VALIDATED
from hospitalsim.templates import default_templates

TINY_KB_YAML = """\
schema_version: 1
departments:
  - {id: respiratory, name: Respiratory Department, kind: clinical}
  - {id: dermatology, name: Dermatology Department, kind: clinical}
  - {id: anatomy, name: Anatomy, kind: non_clinical}
diseases:
  - disease_id: covid_19
    name: COVID-19
    department_id: respiratory
    risk_factors: [recent close contact with infected individuals]
    symptoms: [dry throat, sore throat, fever, runny nose]
    examinations:
      Blood Test: lymphocyte count decreased
      Chest X-ray Exam: patchy shadows in the outer lung zones
    treatment_plans:
      mild: rest and oral antivirals
      moderate: antipyretics and monitored antivirals
      severe: respiratory support and immunoglobulin
  - disease_id: influenza_b
    name: Influenza B
    department_id: respiratory
    risk_factors: []
    symptoms: [sudden high fever, chills, dry cough, muscle aches]
    examinations:
      Rapid Antigen Test: positive band for type B antigen
    treatment_plans:
      default: rest, fluids, and a neuraminidase inhibitor
  - disease_id: herpes_zoster
    name: Herpes Zoster
    department_id: dermatology
    risk_factors: [age over fifty, past chickenpox episode]
    symptoms: [burning skin pain, clusters of fluid-filled blisters, banded red rash]
    examinations:
      Skin Examination: grouped vesicles confined to one dermatome
    treatment_plans:
      default: prompt oral antivirals and stepped analgesia
"""


@pytest.fixture(scope="session")
def default_kb():
    return load_default_knowledge()


@pytest.fixture()
def tiny_kb(tmp_path):
    path = tmp_path / "tiny_kb.yaml"
    path.write_text(TINY_KB_YAML, encoding="utf-8")
    return load_knowledge_base(path)


@pytest.fixture(scope="session")
def templates():
    return default_templates()


_PATIENT_ID_RE = re.compile(r"Patient ID: (\S+)")


def truth_of(req, truths):
    match = _PATIENT_ID_RE.search(req.joined_content())
    assert match, "prompt carries no patient id"
    return truths[match.group(1)]


def correct_answer_for(kb, truth, task):
    gt = ground_truth_for(kb, truth.disease_id)
    if task == "examination":
        return ", ".join(sorted(gt.correct_examinations))
    if task == "diagnosis":
        return gt.correct_diagnosis
    return gt.correct_treatments[truth.severity]


WRONG_ANSWERS = {
    "examination": "Palm Reading",
    "diagnosis": "Common Cold",
    "treatment": "Drink more water.",
}


def build_evolution_mock(kb, truths, doctors, embed_dim: int = 16) -> MockBackend:
    """Scripted backend for closed-cycle runs: a task answer is correct iff
    some doctor's case base already holds a case for the same disease (or a
    validated principle reflected from it); validation retries always fix
    the origin, so the first failure on a disease seeds the bridge that
    heals its revisit."""

    def coverage(task: str, correct: str) -> bool:
        for doctor in doctors():
            if any(c.answer_text == correct for c in doctor.case_bases[task].entries):
                return True
            if any(
                p.status == STATUS_VALIDATED and p.origin.correct_answer == correct
                for p in doctor.experience_bases[task].entries
            ):
                return True
        return False

    def task_reply(task):
        def reply(req):
            truth = truth_of(req, truths)
            correct = correct_answer_for(kb, truth, task)
            if coverage(task, correct):
                return f"Answer: {correct}"
            return f"Answer: {WRONG_ANSWERS[task]}"

        return reply

    def validate_reply(req):
        truth = truth_of(req, truths)
        task = req.tag.split(":", 1)[1]
        return "Answer: " + correct_answer_for(kb, truth, task)

    def reflect_reply(req):
        match = re.search(r"The correct answer: (.+)", req.joined_content())
        return f"Principle: prefer the answer {match.group(1).strip()}"

    rules = [MockRule(tag=task, reply=task_reply(task))
             for task in ("examination", "diagnosis", "treatment")]
    rules += [MockRule(tag=f"validate:{task}", reply=validate_reply)
              for task in ("examination", "diagnosis", "treatment")]
    rules.append(MockRule(tag="reflect", reply=reflect_reply))
    rules.append(MockRule(tag="judge", reply="Keep: none"))
    return MockBackend(rules, embed_dim=embed_dim)


def build_always_correct_mock(kb, truths, embed_dim: int = 16) -> MockBackend:
    def task_reply(task):
        def reply(req):
            truth = truth_of(req, truths)
            return "Answer: " + correct_answer_for(kb, truth, task)

        return reply

    rules = [MockRule(tag=task, reply=task_reply(task))
             for task in ("examination", "diagnosis", "treatment")]
    rules += [MockRule(tag=f"validate:{task}", reply=task_reply(task))
              for task in ("examination", "diagnosis", "treatment")]
    return MockBackend(rules, embed_dim=embed_dim)
