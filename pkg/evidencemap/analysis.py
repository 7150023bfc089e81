"""
Evidence analysis.

Builds the latent part of an evidence map: one feature per evidence node, a
support vector per node against the question, a correlation vector per node
pair, and an MLP summary over all node features. Every vector is the encoder
state at the trailing cue of a rendered prompt template.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import toml
import torch
from torch import nn
from torch.nn import functional as F

from evidencemap.backends import EncoderBackend
from evidencemap.core_types import (
    AnalysisBundle,
    AnalysisFlags,
    EvidenceItem,
    EvidenceMapRecord,
    canonical_order,
    pair_index_list,
)
from evidencemap.errors import ConfigError, DimensionMismatch, IndexOutOfRange, PreconditionError

logger = logging.getLogger(__name__)

INDIVIDUAL_TEMPLATE = "Evidence: {evidence}\nThis evidence means: "
SUPPORT_TEMPLATE = "Evidence: {evidence}\nQuestion: {question}\nHow much the evidence supports the question:"
CORRELATION_TEMPLATE = (
    "Evidence1: {evidence1}\nEvidence2: {evidence2}\n"
    "The logical relationship between these two pieces of evidence:"
)

INDIVIDUAL_CUE = "This evidence means: "
SUPPORT_CUE = "How much the evidence supports the question:"
CORRELATION_CUE = "The logical relationship between these two pieces of evidence:"

_PLACEHOLDER = re.compile(r"\{(evidence|evidence1|evidence2|question)\}")


def render(template: str, **values: str) -> str:
    """Single-pass placeholder substitution; substituted text is never re-scanned."""
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)


_TRUNCATABLE = frozenset({"evidence", "evidence1", "evidence2"})


def template_segments(template: str, **values: str) -> List[Tuple[str, bool]]:
    """
    The rendered template as ordered (text, truncatable) pieces.

    Evidence values may be cut to fit the encoder context; template text and
    the question are fixed. Joining the pieces gives render(template, **values).
    """
    segments: List[Tuple[str, bool]] = []
    start = 0
    for match in _PLACEHOLDER.finditer(template):
        segments.append((template[start:match.start()], False))
        segments.append((values[match.group(1)], match.group(1) in _TRUNCATABLE))
        start = match.end()
    segments.append((template[start:], False))
    return [(text, cut) for text, cut in segments if text]


@dataclass(frozen=True)
class PromptTemplates:
    individual: str = INDIVIDUAL_TEMPLATE
    support: str = SUPPORT_TEMPLATE
    correlation: str = CORRELATION_TEMPLATE

    def __post_init__(self) -> None:
        checks = [
            ("individual", self.individual, INDIVIDUAL_CUE, {"evidence"}),
            ("support", self.support, SUPPORT_CUE, {"evidence", "question"}),
            ("correlation", self.correlation, CORRELATION_CUE, {"evidence1", "evidence2"}),
        ]
        problems = []
        for name, text, cue, needed in checks:
            if not text.endswith(cue):
                problems.append(f"{name} template must end with {cue!r}")
            missing = needed - set(_PLACEHOLDER.findall(text))
            if missing:
                problems.append(f"{name} template is missing {', '.join(sorted(missing))}")
        if problems:
            raise ConfigError("Invalid prompt templates:\n" + "\n".join(problems))

    @classmethod
    def from_file(cls, path: Path) -> "PromptTemplates":
        """Load overrides from a TOML file with keys individual/support/correlation."""
        try:
            data = toml.load(str(path))
        except (OSError, toml.TomlDecodeError) as exc:
            raise ConfigError(f"cannot read templates from {path}: {exc}") from exc
        known = {"individual", "support", "correlation"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown template keys: {', '.join(sorted(unknown))}")
        return cls(**{k: str(v) for k, v in data.items()})

    def render_individual(self, evidence: str) -> str:
        return render(self.individual, evidence=evidence)

    def render_support(self, evidence: str, question: str) -> str:
        return render(self.support, evidence=evidence, question=question)

    def render_correlation(self, evidence1: str, evidence2: str) -> str:
        return render(self.correlation, evidence1=evidence1, evidence2=evidence2)


class SummarizerMLP(nn.Module):
    """Fixed-width MLP over the zero-padded concatenation of node features."""

    def __init__(self, dim: int, slots: int, hidden: int, n_layers: int = 2, dtype: torch.dtype = torch.float64):
        super().__init__()
        if n_layers < 1:
            raise ConfigError("summarizer needs at least one layer")
        self.dim = dim
        self.slots = slots
        widths = [slots * dim] + [hidden] * (n_layers - 1) + [dim]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=dtype) for a, b in zip(widths, widths[1:]))

    def layout(self, features: Sequence[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Concatenated input and the per-slot occupancy mask."""
        if len(features) > self.slots:
            raise DimensionMismatch(f"{len(features)} features exceed the summarizer's {self.slots} slots")
        for k, f in enumerate(features):
            if f.shape != (self.dim,):
                raise DimensionMismatch(f"feature {k} has shape {tuple(f.shape)}, expected ({self.dim},)")
        dtype = self.layers[0].weight.dtype
        padding = [torch.zeros(self.dim, dtype=dtype)] * (self.slots - len(features))
        x = torch.cat([f.to(dtype) for f in features] + padding)
        mask = torch.tensor([k < len(features) for k in range(self.slots)])
        return x, mask

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = F.relu(layer(x))
        return x


# -------------------- Operations --------------------
def pool_hidden(states: torch.Tensor, pooled_index: int) -> torch.Tensor:
    if not 0 <= pooled_index < states.shape[0]:
        raise IndexOutOfRange(f"pooled index {pooled_index} outside {states.shape[0]} rows")
    return states[pooled_index]


def _encode(template: str, encoder: EncoderBackend, **values: str) -> torch.Tensor:
    encoded = encoder.encode_segments(template_segments(template, **values))
    return pool_hidden(encoded.states, encoded.pooled_index)


def encode_evidence(item: EvidenceItem, encoder: EncoderBackend, templates: PromptTemplates) -> torch.Tensor:
    return _encode(templates.individual, encoder, evidence=item.text)


def encode_support(item: EvidenceItem, question: str, encoder: EncoderBackend,
                   templates: PromptTemplates) -> torch.Tensor:
    if not question.strip():
        raise PreconditionError("question must be non-empty")
    return _encode(templates.support, encoder, evidence=item.text, question=question)


def encode_correlation(item_i: EvidenceItem, item_j: EvidenceItem, encoder: EncoderBackend,
                       templates: PromptTemplates) -> torch.Tensor:
    return _encode(templates.correlation, encoder, evidence1=item_i.text, evidence2=item_j.text)


def summarize(features: Sequence[torch.Tensor], mlp: SummarizerMLP) -> torch.Tensor:
    x, _ = mlp.layout(features)
    return mlp(x)


def build_analysis(record: EvidenceMapRecord, encoder: EncoderBackend, templates: PromptTemplates,
                   mlp: SummarizerMLP, flags: Optional[AnalysisFlags] = None) -> AnalysisBundle:
    """
    Run every enabled analysis over the record's evidence nodes.

    The LLM evidence item is a node like any paper snippet; nodes are visited
    in canonical order. Disabled parts are left empty and the bundle records
    the flags that were actually in effect.
    """
    flags = flags or AnalysisFlags()
    active = flags.effective()
    nodes = canonical_order(record.evidence)
    m = len(nodes)
    logger.debug("Evidence map %s: %d nodes, %d support relations, %d correlations",
                 record.id, m, m, m * (m - 1) // 2)

    summary = None
    if active.sum:
        summary = summarize([encode_evidence(node, encoder, templates) for node in nodes], mlp)

    eval_vectors: List[Tuple[str, torch.Tensor]] = []
    if active.eval:
        eval_vectors = [(node.id, encode_support(node, record.question, encoder, templates)) for node in nodes]

    cor_vectors: List[Tuple[Tuple[str, str], torch.Tensor]] = []
    if active.cor and m:
        cor_vectors = [
            ((nodes[i].id, nodes[j].id), encode_correlation(nodes[i], nodes[j], encoder, templates))
            for i, j in pair_index_list(m)
        ]

    return AnalysisBundle(summary=summary, eval_vectors=tuple(eval_vectors),
                          cor_vectors=tuple(cor_vectors), flags=active)
