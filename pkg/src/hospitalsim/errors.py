"""Exception hierarchy shared across the package."""

from __future__ import annotations


class HospitalSimError(Exception):
    """Base class for all package errors."""


# -- knowledge ---------------------------------------------------------------

class KnowledgeParseError(HospitalSimError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        loc = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{loc}: {message}")


class ReferentialError(HospitalSimError):
    """A record references an id that does not exist."""


class DuplicateIdError(HospitalSimError):
    pass


class UnknownDepartmentError(HospitalSimError):
    pass


class UnknownDiseaseError(HospitalSimError):
    pass


# -- llm gateway -------------------------------------------------------------

class GatewayError(HospitalSimError):
    pass


class TransportError(GatewayError):
    """Network-level failure after all retries were exhausted."""


class ServiceError(GatewayError):
    """Non-retryable error status returned by the inference service."""

    def __init__(self, status_code, body_excerpt):
        self.status_code = status_code
        self.body_excerpt = body_excerpt
        super().__init__(f"service returned {status_code}: {body_excerpt}")


class MockScriptMissError(GatewayError):
    """No scripted rule matched a mock chat request."""

    def __init__(self, tag):
        self.tag = tag
        super().__init__(f"no mock rule matched request tag {tag!r}")


class EmptyTextError(GatewayError):
    pass


# -- memory store ------------------------------------------------------------

class DimMismatchError(HospitalSimError):
    pass


class ZeroVectorError(HospitalSimError):
    pass


class EncoderMismatchError(HospitalSimError):
    pass


class TaskMismatchError(HospitalSimError):
    pass


class VersionMismatchError(HospitalSimError):
    pass


class CorruptRecordError(HospitalSimError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


# -- patient factory ---------------------------------------------------------

class GenerationParseError(HospitalSimError):
    pass


class QcExhaustedError(HospitalSimError):
    pass


# -- doctor engine -----------------------------------------------------------

class TemplateMissingError(HospitalSimError):
    pass


class AnswerParseError(HospitalSimError):
    pass


class ReflectionParseError(HospitalSimError):
    pass


# -- simulacrum --------------------------------------------------------------

class UnroutableError(HospitalSimError):
    pass


class IllegalPhaseError(HospitalSimError):
    pass


class CheckpointError(HospitalSimError):
    pass


# -- evaluation / cli --------------------------------------------------------

class EmptySeriesError(HospitalSimError):
    pass


class OverlapError(HospitalSimError):
    """Test cohort shares records with the training cohort."""


class ConfigError(HospitalSimError):
    pass
