"""Closed-cycle hospital simulation with self-evolving doctor agents.

Synthetic patients are generated from a disease knowledge base, walk the
eight-event treatment cycle against doctor agents, and every graded decision
feeds two evolution memories: a medical case base (learning from success)
and a validated experience base (learning from failure).
"""

__version__ = "0.1.0"

from .doctor import DoctorAgent, DoctorConfig, TaskInstance
from .knowledge import KnowledgeBase, load_default_knowledge, load_knowledge_base
from .llm import BackendConfig, ChatRequest, EmbeddingVector, MockBackend, OpenAIBackend
from .memory import MedicalCase, ExperiencePrinciple, VectorBase, cosine_similarity
from .patients import Cohort, CohortSpec, PatientRecord, sample_cohort
from .world import SimulationLog, VisitState, World, WorldConfig

__all__ = [
    "BackendConfig",
    "ChatRequest",
    "Cohort",
    "CohortSpec",
    "DoctorAgent",
    "DoctorConfig",
    "EmbeddingVector",
    "ExperiencePrinciple",
    "KnowledgeBase",
    "MedicalCase",
    "MockBackend",
    "OpenAIBackend",
    "PatientRecord",
    "SimulationLog",
    "TaskInstance",
    "VectorBase",
    "VisitState",
    "World",
    "WorldConfig",
    "cosine_similarity",
    "load_default_knowledge",
    "load_knowledge_base",
    "sample_cohort",
]
