import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hospitalsim.errors import (
    CorruptRecordError,
    DimMismatchError,
    EncoderMismatchError,
    TaskMismatchError,
    VersionMismatchError,
    ZeroVectorError,
)
from hospitalsim.llm import EmbeddingVector
from hospitalsim.memory import (
    CASE_KIND,
    EXPERIENCE_KIND,
    STATUS_CANDIDATE,
    STATUS_DISCARDED,
    STATUS_VALIDATED,
    MedicalCase,
    ExperiencePrinciple,
    Origin,
    VectorBase,
    bases_equal,
    cosine_similarity,
    load_base,
)


def vec(*values):
    return EmbeddingVector(np.array(values, dtype=np.float64))


def make_case(i, task="diagnosis", dim=4, rng=None, source="interaction"):
    if rng is None:
        values = np.zeros(dim)
        values[i % dim] = 1.0 + i
    else:
        values = rng.standard_normal(dim)
    return MedicalCase(
        case_id=0, task=task, question_text=f"q{i}", answer_text=f"a{i}",
        embedding=EmbeddingVector(values), source=source,
    )


def make_principle(i, task="diagnosis", dim=4, status=STATUS_VALIDATED, rng=None):
    values = rng.standard_normal(dim) if rng is not None else np.eye(dim)[i % dim] * (i + 1)
    return ExperiencePrinciple(
        principle_id=0, task=task, text=f"rule {i}",
        embedding=EmbeddingVector(values),
        origin=Origin(f"q{i}", f"wrong{i}", f"right{i}", ("right" + str(i), "other")),
        status=status,
    )


# -- cosine ---------------------------------------------------------------------

def test_cosine_identity():
    assert cosine_similarity(vec(3, 4), vec(3, 4)) == pytest.approx(1.0, abs=1e-9)


def test_cosine_orthogonal():
    assert cosine_similarity(vec(1, 0), vec(0, 1)) == 0.0


def test_cosine_hand_value():
    # 32 / (sqrt(14) * sqrt(77)) computed by hand
    assert cosine_similarity(vec(1, 2, 3), vec(4, 5, 6)) == pytest.approx(
        0.974631846, abs=1e-6
    )


def test_cosine_errors():
    with pytest.raises(DimMismatchError):
        cosine_similarity(vec(1, 2), vec(1, 2, 3))
    with pytest.raises(ZeroVectorError):
        cosine_similarity(vec(0, 0), vec(1, 1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_cosine_symmetry_and_range(a, b):
    va, vb = vec(*a), vec(*b)
    if va.norm() == 0 or vb.norm() == 0:
        return
    s1 = cosine_similarity(va, vb)
    s2 = cosine_similarity(vb, va)
    assert s1 == pytest.approx(s2, abs=1e-12)
    assert -1.0 - 1e-9 <= s1 <= 1.0 + 1e-9


# -- inserts ---------------------------------------------------------------------

def test_insert_ids_monotone():
    base = VectorBase(CASE_KIND, "diagnosis")
    ids = [base.add_case(make_case(i)) for i in range(100)]
    assert ids == list(range(1, 101))


def test_first_insert_gets_id_one():
    base = VectorBase(EXPERIENCE_KIND, "treatment")
    assert base.add_experience(make_principle(0, task="treatment")) == 1


def test_encoder_mismatch():
    base = VectorBase(CASE_KIND, "diagnosis", encoder_name="ada")
    with pytest.raises(EncoderMismatchError):
        base.add_case(make_case(1), encoder_name="mock-16")


def test_task_and_kind_mismatch():
    base = VectorBase(CASE_KIND, "diagnosis")
    with pytest.raises(TaskMismatchError):
        base.add_case(make_case(1, task="treatment"))
    with pytest.raises(TaskMismatchError):
        base.add_experience(make_principle(1))


def test_zero_embedding_rejected():
    base = VectorBase(CASE_KIND, "diagnosis")
    case = make_case(1)
    case.embedding = vec(0, 0, 0, 0)
    with pytest.raises(ZeroVectorError):
        base.add_case(case)


# -- retrieval ---------------------------------------------------------------------

def retrieve_oracle(entries, eligible, query, k):
    rows = [(i, e) for i, e in enumerate(entries) if eligible(e)]
    qn = np.linalg.norm(query.values)
    scored = [
        (float(np.dot(e.embedding.values, query.values)
               / (np.linalg.norm(e.embedding.values) * qn)), e)
        for _i, e in rows
    ]
    ranked = sorted(
        scored,
        key=lambda pair: (-pair[0],
                          pair[1].case_id if isinstance(pair[1], MedicalCase)
                          else pair[1].principle_id),
    )
    return [entry for _s, entry in ranked[:k]]


def test_retrieve_empty_base():
    base = VectorBase(CASE_KIND, "diagnosis")
    assert base.retrieve(vec(1, 0, 0, 0), 3) == []


def test_retrieve_matches_oracle_random_base():
    rng = np.random.default_rng(3)
    base = VectorBase(CASE_KIND, "diagnosis")
    for i in range(50):
        base.add_case(make_case(i, dim=16, rng=rng))
    query = EmbeddingVector(rng.standard_normal(16))
    got = [entry for entry, _s in base.retrieve(query, 5)]
    expected = retrieve_oracle(base.entries, lambda e: True, query, 5)
    assert [e.case_id for e in got] == [e.case_id for e in expected]
    sims = [s for _e, s in base.retrieve(query, 5)]
    assert sims == sorted(sims, reverse=True)


def test_retrieve_tie_breaks_by_insertion_id():
    base = VectorBase(CASE_KIND, "diagnosis")
    a = make_case(0)
    b = make_case(1)
    b.embedding = EmbeddingVector(a.embedding.values.copy())
    base.add_case(a)
    base.add_case(b)
    got = base.retrieve(EmbeddingVector(a.embedding.values.copy()), 2)
    assert [entry.case_id for entry, _s in got] == [1, 2]


def test_retrieve_excludes_candidate_and_discarded():
    base = VectorBase(EXPERIENCE_KIND, "diagnosis")
    base.add_experience(make_principle(0, status=STATUS_VALIDATED))
    base.add_experience(make_principle(1, status=STATUS_CANDIDATE))
    base.add_experience(make_principle(2, status=STATUS_DISCARDED))
    got = base.retrieve(vec(1, 1, 1, 1), 10)
    assert [p.principle_id for p, _s in got] == [1]


def test_retrieve_errors():
    base = VectorBase(CASE_KIND, "diagnosis")
    base.add_case(make_case(0))
    with pytest.raises(DimMismatchError):
        base.retrieve(vec(1, 0), 2)
    with pytest.raises(ZeroVectorError):
        base.retrieve(vec(0, 0, 0, 0), 2)
    with pytest.raises(EncoderMismatchError):
        base._check_encoder("enc-a")
        base.retrieve(vec(1, 0, 0, 0), 1, encoder_name="enc-b")


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=120), st.integers(min_value=0, max_value=12),
       st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_retrieve_oracle_property(n, k, seed):
    rng = np.random.default_rng(seed)
    base = VectorBase(CASE_KIND, "diagnosis")
    for i in range(n):
        base.add_case(make_case(i, dim=8, rng=rng))
    if n > 2:  # force ties
        base.entries[1].embedding = EmbeddingVector(base.entries[0].embedding.values.copy())
    query = EmbeddingVector(rng.standard_normal(8))
    got = [entry.case_id for entry, _s in base.retrieve(query, k)]
    expected = [e.case_id for e in retrieve_oracle(base.entries, lambda e: True, query, k)]
    assert got == expected


# -- monotone growth -----------------------------------------------------------------

def test_status_transitions_once():
    principle = make_principle(0, status=STATUS_CANDIDATE)
    base = VectorBase(EXPERIENCE_KIND, "diagnosis")
    base.add_experience(principle)
    principle.status = STATUS_VALIDATED
    # nothing in the API removes entries; append-only by construction
    assert len(base) == 1


# -- persistence ----------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    base = VectorBase(CASE_KIND, "diagnosis", encoder_name="mock-16")
    for i in range(1000):
        base.add_case(make_case(i, dim=16, rng=rng))
    path = tmp_path / "cases.jsonl"
    base.save(path)
    loaded = load_base(path)
    assert bases_equal(base, loaded)
    for original, restored in zip(base.entries[:5], loaded.entries[:5]):
        assert np.array_equal(original.embedding.values, restored.embedding.values)


def test_experience_round_trip_keeps_status(tmp_path):
    base = VectorBase(EXPERIENCE_KIND, "diagnosis", encoder_name="e")
    base.add_experience(make_principle(0, status=STATUS_VALIDATED))
    base.add_experience(make_principle(1, status=STATUS_DISCARDED))
    path = tmp_path / "exp.jsonl"
    base.save(path)
    loaded = load_base(path)
    assert [p.status for p in loaded.entries] == [STATUS_VALIDATED, STATUS_DISCARDED]
    assert loaded.entries[0].origin.candidates == ("right0", "other")


def test_version_mismatch(tmp_path):
    path = tmp_path / "v99.jsonl"
    path.write_text(json.dumps({"schema_version": 99, "kind": "case", "task": "diagnosis"})
                    + "\n", encoding="utf-8")
    with pytest.raises(VersionMismatchError):
        load_base(path)


def test_truncated_record_names_line(tmp_path):
    base = VectorBase(CASE_KIND, "diagnosis", encoder_name="e")
    base.add_case(make_case(0))
    base.add_case(make_case(1))
    path = tmp_path / "trunc.jsonl"
    base.save(path)
    content = path.read_text(encoding="utf-8").splitlines()
    content[-1] = content[-1][: len(content[-1]) // 2]
    path.write_text("\n".join(content) + "\n", encoding="utf-8")
    with pytest.raises(CorruptRecordError) as err:
        load_base(path)
    assert err.value.line == 3


def test_attach_appends_durably(tmp_path):
    path = tmp_path / "live.jsonl"
    base = VectorBase(CASE_KIND, "diagnosis", encoder_name="e")
    base.attach(path)
    base.add_case(make_case(0))
    base.add_case(make_case(1))
    # readable while still attached: flushed on every insert
    loaded = load_base(path)
    assert len(loaded) == 2
    base.detach()
    assert bases_equal(base, load_base(path))
