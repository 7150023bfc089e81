"""Evidence-map analysis for question answering with a frozen generator."""

from evidencemap.core_types import (
    AnalysisBundle,
    AnalysisFlags,
    EvidenceItem,
    EvidenceMapRecord,
    EvidenceSource,
    QAOutput,
)
from evidencemap.errors import EvidenceMapError
from evidencemap.pipeline import EvidenceMapStack, ModelConfig, build_stack

__version__ = "0.1.0"

__all__ = [
    "AnalysisBundle",
    "AnalysisFlags",
    "EvidenceItem",
    "EvidenceMapError",
    "EvidenceMapRecord",
    "EvidenceMapStack",
    "EvidenceSource",
    "ModelConfig",
    "QAOutput",
    "build_stack",
    "__version__",
]
