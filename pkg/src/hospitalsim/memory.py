"""Medical case base and experience base.

Both are append-only embedded vector stores with exact brute-force cosine
retrieval (see `kernels`). Entries are persisted one JSON record per line
behind a header line carrying the schema version and encoder name; floats
round-trip bit-exactly through `json`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (
    CorruptRecordError,
    DimMismatchError,
    EncoderMismatchError,
    TaskMismatchError,
    VersionMismatchError,
    ZeroVectorError,
)
from .llm import EmbeddingVector

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

EXAMINATION = "examination"
DIAGNOSIS = "diagnosis"
TREATMENT = "treatment"
TASKS = (EXAMINATION, DIAGNOSIS, TREATMENT)

CASE_KIND = "case"
EXPERIENCE_KIND = "experience"

SOURCE_INTERACTION = "interaction"
SOURCE_BOOK = "book"
SOURCE_EXTERNAL = "external_labeled"

STATUS_CANDIDATE = "candidate"
STATUS_VALIDATED = "validated"
STATUS_DISCARDED = "discarded"


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """dot(a,b) / (|a||b|), in [-1, 1]."""
    if a.dim != b.dim:
        raise DimMismatchError(f"dims differ: {a.dim} vs {b.dim}")
    na, nb = a.norm(), b.norm()
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity undefined for zero vectors")
    return float(np.dot(a.values, b.values) / (na * nb))


@dataclass
class MedicalCase:
    case_id: int
    task: str
    question_text: str
    answer_text: str
    embedding: EmbeddingVector
    source: str = SOURCE_INTERACTION


@dataclass
class Origin:
    """Provenance of a reflected principle: the mistake it came from."""

    question_text: str
    wrong_answer: str
    correct_answer: str
    candidates: tuple[str, ...] = ()  # kept so the origin can be re-answered


@dataclass
class ExperiencePrinciple:
    principle_id: int
    task: str
    text: str
    embedding: EmbeddingVector
    origin: Origin
    status: str = STATUS_CANDIDATE
    refined: bool = False
    note: str = ""


class VectorBase:
    """Append-ordered store of cases or principles for a single task.

    Insertion ids are strictly increasing; the encoder name is fixed by the
    first insert and mixed-encoder inserts or queries are rejected. Writes
    must come from a single writer; reads are safe from any thread.
    """

    def __init__(self, kind: str, task: str, encoder_name: str | None = None):
        if kind not in (CASE_KIND, EXPERIENCE_KIND):
            raise ValueError(f"unknown base kind {kind!r}")
        if task not in TASKS:
            raise TaskMismatchError(f"unknown task {task!r}")
        self.kind = kind
        self.task = task
        self.encoder_name = encoder_name
        self.entries: list = []
        self._persist_fh = None
        self._persist_path: Path | None = None
        self._matrix: np.ndarray | None = None  # cache over eligible entries
        self._matrix_rows: list[int] = []

    def __len__(self) -> int:
        return len(self.entries)

    # -- encoder / dim guards --------------------------------------------

    def _check_encoder(self, encoder_name: str | None):
        if encoder_name is None:
            return
        if self.encoder_name is None:
            self.encoder_name = encoder_name
        elif encoder_name != self.encoder_name:
            raise EncoderMismatchError(
                f"base uses encoder {self.encoder_name!r}, got {encoder_name!r}"
            )

    def _check_embedding(self, emb: EmbeddingVector):
        if self.entries and emb.dim != self.entries[0].embedding.dim:
            raise DimMismatchError(
                f"embedding dim {emb.dim} != base dim {self.entries[0].embedding.dim}"
            )
        if emb.norm() == 0.0:
            raise ZeroVectorError("refusing to store a zero embedding")

    def _next_id(self) -> int:
        if not self.entries:
            return 1
        return max(_entry_id(e) for e in self.entries) + 1

    def _append(self, entry) -> int:
        self.entries.append(entry)
        self._matrix = None
        if self._persist_fh is not None:
            self._persist_fh.write(_dump_entry(self.kind, entry) + "\n")
            self._persist_fh.flush()
        return _entry_id(entry)

    # -- inserts -----------------------------------------------------------

    def add_case(self, case: MedicalCase, encoder_name: str | None = None) -> int:
        if self.kind != CASE_KIND:
            raise TaskMismatchError("cannot add a case to an experience base")
        if case.task != self.task:
            raise TaskMismatchError(f"case task {case.task!r} != base task {self.task!r}")
        self._check_encoder(encoder_name)
        self._check_embedding(case.embedding)
        case.case_id = self._next_id()
        return self._append(case)

    def add_experience(self, principle: ExperiencePrinciple,
                       encoder_name: str | None = None) -> int:
        if self.kind != EXPERIENCE_KIND:
            raise TaskMismatchError("cannot add a principle to a case base")
        if principle.task != self.task:
            raise TaskMismatchError(
                f"principle task {principle.task!r} != base task {self.task!r}"
            )
        self._check_encoder(encoder_name)
        self._check_embedding(principle.embedding)
        principle.principle_id = self._next_id()
        return self._append(principle)

    # -- retrieval ---------------------------------------------------------

    def _eligible(self) -> list:
        if self.kind == CASE_KIND:
            return self.entries
        return [e for e in self.entries if e.status == STATUS_VALIDATED]

    def retrieve(self, query: EmbeddingVector, k: int,
                 encoder_name: str | None = None) -> list[tuple[object, float]]:
        """Top-k eligible entries by cosine similarity, descending, ties
        broken by the smaller insertion id. Exact full scan."""
        if k < 0:
            raise ValueError("k must be >= 0")
        if (
            encoder_name is not None
            and self.encoder_name is not None
            and encoder_name != self.encoder_name
        ):
            raise EncoderMismatchError(
                f"base uses encoder {self.encoder_name!r}, got {encoder_name!r}"
            )
        eligible = self._eligible()
        if k == 0 or not eligible:
            return []
        if query.dim != eligible[0].embedding.dim:
            raise DimMismatchError(
                f"query dim {query.dim} != base dim {eligible[0].embedding.dim}"
            )
        qnorm = query.norm()
        if qnorm == 0.0:
            raise ZeroVectorError("zero query vector")
        rows = [_entry_id(e) for e in eligible]
        if self._matrix is None or self._matrix_rows != rows:
            self._matrix = np.ascontiguousarray(
                np.stack([e.embedding.values for e in eligible])
            )
            self._matrix_norms = kernels.row_norms(self._matrix)
            self._matrix_rows = rows
        top, sims = kernels.cosine_topk(
            self._matrix, self._matrix_norms, query.values, qnorm, k
        )
        return [(eligible[int(i)], float(s)) for i, s in zip(top, sims)]

    # -- persistence ---------------------------------------------------------

    def header(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "task": self.task,
            "encoder_name": self.encoder_name,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            for entry in self.entries:
                fh.write(_dump_entry(self.kind, entry) + "\n")

    def attach(self, path: str | Path) -> None:
        """Open `path` for durable appends: every subsequent insert is
        written and flushed before the insert returns."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not path.exists() or path.stat().st_size == 0
        self._persist_fh = open(path, "a", encoding="utf-8")
        self._persist_path = path
        if fresh:
            self._persist_fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            self._persist_fh.flush()

    def detach(self) -> None:
        if self._persist_fh is not None:
            self._persist_fh.close()
            self._persist_fh = None
            self._persist_path = None


def _entry_id(entry) -> int:
    return entry.case_id if isinstance(entry, MedicalCase) else entry.principle_id


def _dump_entry(kind: str, entry) -> str:
    if kind == CASE_KIND:
        rec = {
            "case_id": entry.case_id,
            "task": entry.task,
            "question_text": entry.question_text,
            "answer_text": entry.answer_text,
            "embedding": entry.embedding.values.tolist(),
            "source": entry.source,
        }
    else:
        rec = {
            "principle_id": entry.principle_id,
            "task": entry.task,
            "text": entry.text,
            "embedding": entry.embedding.values.tolist(),
            "origin": {
                "question_text": entry.origin.question_text,
                "wrong_answer": entry.origin.wrong_answer,
                "correct_answer": entry.origin.correct_answer,
                "candidates": list(entry.origin.candidates),
            },
            "status": entry.status,
            "refined": entry.refined,
            "note": entry.note,
        }
    return json.dumps(rec, sort_keys=True)


def _load_entry(kind: str, rec: dict):
    if kind == CASE_KIND:
        return MedicalCase(
            case_id=rec["case_id"],
            task=rec["task"],
            question_text=rec["question_text"],
            answer_text=rec["answer_text"],
            embedding=EmbeddingVector(np.asarray(rec["embedding"], dtype=np.float64)),
            source=rec["source"],
        )
    origin = rec["origin"]
    return ExperiencePrinciple(
        principle_id=rec["principle_id"],
        task=rec["task"],
        text=rec["text"],
        embedding=EmbeddingVector(np.asarray(rec["embedding"], dtype=np.float64)),
        origin=Origin(
            question_text=origin["question_text"],
            wrong_answer=origin["wrong_answer"],
            correct_answer=origin["correct_answer"],
            candidates=tuple(origin.get("candidates", ())),
        ),
        status=rec["status"],
        refined=rec["refined"],
        note=rec.get("note", ""),
    )


def load_base(path: str | Path) -> VectorBase:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorruptRecordError(path, 1, "empty base file (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptRecordError(path, 1, f"bad header: {exc}") from exc
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise VersionMismatchError(
            f"{path}: schema_version {version!r} not supported (expected {SCHEMA_VERSION})"
        )
    base = VectorBase(header["kind"], header["task"], header.get("encoder_name"))
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            base.entries.append(_load_entry(base.kind, rec))
        except (json.JSONDecodeError, KeyError) as exc:
            raise CorruptRecordError(path, lineno, f"corrupt record: {exc}") from exc
    return base


def bases_equal(a: VectorBase, b: VectorBase) -> bool:
    """Structural equality with bit-exact embeddings."""
    if (a.kind, a.task, a.encoder_name, len(a)) != (b.kind, b.task, b.encoder_name, len(b)):
        return False
    return all(
        _dump_entry(a.kind, ea) == _dump_entry(b.kind, eb)
        for ea, eb in zip(a.entries, b.entries)
    )
