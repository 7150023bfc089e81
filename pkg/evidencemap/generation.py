"""
Soft-prompt generation against the frozen decoder.

Analysis vectors are projected into the decoder's embedding space and placed
ahead of the embedded evidence/question text. The same assembled prefix drives
greedy decoding and the teacher-forced answer loss.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from evidencemap.backends import DecoderBackend
from evidencemap.core_types import AnalysisBundle, AnalysisFlags, EvidenceMapRecord, QAOutput, canonical_order
from evidencemap.errors import ConfigError, DimensionMismatch, PreconditionError

logger = logging.getLogger(__name__)

EVIDENCE_LINE = "Evidence: {text}"
QUESTION_LINE = "Question: {question}"
TEXT_SEPARATOR = "\n"

PROJECTOR_MODES = ("mlp", "linear")


class ProjectorMLP(nn.Module):
    """Shared d_e -> d_g map for every analysis vector; ``linear`` is a single affine layer."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int, n_layers: int = 2,
                 mode: str = "mlp", dtype: torch.dtype = torch.float64):
        super().__init__()
        if mode not in PROJECTOR_MODES:
            raise ConfigError(f"unknown projector mode {mode!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.mode = mode
        if mode == "linear" or n_layers < 2:
            widths = [in_dim, out_dim]
        else:
            widths = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
        layers: List[nn.Module] = []
        for k, (a, b) in enumerate(zip(widths, widths[1:])):
            if k:
                layers.append(nn.ReLU())
            layers.append(nn.Linear(a, b, dtype=dtype))
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 2 or x.shape[1] != self.in_dim:
            raise DimensionMismatch(f"projector expects [R x {self.in_dim}], got {tuple(x.shape)}")
        return self.layers(x)


@dataclass(frozen=True)
class PromptAssembly:
    analysis_part: torch.Tensor
    text_part: torch.Tensor
    layout: Tuple[str, ...]

    @property
    def embeddings(self) -> torch.Tensor:
        return torch.cat([self.analysis_part, self.text_part], dim=0)

    def __len__(self) -> int:
        return self.analysis_part.shape[0] + self.text_part.shape[0]


def render_text(record: EvidenceMapRecord, flags: Optional[AnalysisFlags] = None) -> str:
    """Evidence lines in canonical order followed by the question cue."""
    flags = flags or AnalysisFlags()
    lines = []
    if flags.text_evidence:
        lines = [EVIDENCE_LINE.format(text=item.text) for item in canonical_order(record.evidence)]
    lines.append(QUESTION_LINE.format(question=record.question))
    return TEXT_SEPARATOR.join(lines)


def embed_text(record: EvidenceMapRecord, decoder: DecoderBackend, flags: Optional[AnalysisFlags] = None,
               max_tokens: Optional[int] = None) -> torch.Tensor:
    ids = decoder.tokenize(render_text(record, flags))
    if max_tokens is not None and len(ids) > max_tokens:
        # keep the tail so the question cue survives
        logger.debug("Truncating text prompt of %s from %d to %d tokens", record.id, len(ids), max_tokens)
        ids = ids[len(ids) - max_tokens:]
    return decoder.embed_tokens(ids)


def project_analysis(bundle: AnalysisBundle, projector: ProjectorMLP) -> torch.Tensor:
    rows = [vector for _, vector in bundle.vectors_with_roles()]
    dtype = projector.layers[-1].weight.dtype
    if not rows:
        return torch.zeros(0, projector.out_dim, dtype=dtype)
    return projector(torch.stack([row.to(dtype) for row in rows]))


def analysis_roles(bundle: AnalysisBundle) -> List[str]:
    return [role for role, _ in bundle.vectors_with_roles()]


def assemble_prompt(h_analysis: torch.Tensor, h_text: torch.Tensor,
                    analysis_roles: Optional[Sequence[str]] = None) -> PromptAssembly:
    if h_analysis.dim() != 2 or h_text.dim() != 2 or h_analysis.shape[1] != h_text.shape[1]:
        raise DimensionMismatch(
            f"cannot prepend {tuple(h_analysis.shape)} analysis rows to {tuple(h_text.shape)} text rows")
    roles = list(analysis_roles) if analysis_roles is not None else ["analysis"] * h_analysis.shape[0]
    if len(roles) != h_analysis.shape[0]:
        raise DimensionMismatch(f"{len(roles)} role tags for {h_analysis.shape[0]} analysis rows")
    layout = tuple(roles) + ("text",) * h_text.shape[0]
    return PromptAssembly(analysis_part=h_analysis, text_part=h_text.to(h_analysis.dtype), layout=layout)


def generate_answer(assembly: PromptAssembly, decoder: DecoderBackend, max_new_tokens: int,
                    record_id: str = "") -> QAOutput:
    if len(assembly) == 0:
        raise PreconditionError("cannot generate from an empty prompt")
    produced = decoder.generate(assembly.embeddings, max_new_tokens)
    content = [i for i in produced if i not in decoder.control_ids]
    return QAOutput(record_id=record_id, generated_answer=decoder.detokenize(content), token_count=len(content))


def sequence_loss(assembly: PromptAssembly, answer_token_ids: Sequence[int], decoder: DecoderBackend) -> torch.Tensor:
    """Negative log-likelihood of the answer under teacher forcing, summed over tokens."""
    ids = [int(i) for i in answer_token_ids]
    answer_embeddings = decoder.embed_tokens(ids)
    if not ids:
        return torch.zeros((), dtype=assembly.analysis_part.dtype)
    if len(assembly) == 0:
        raise PreconditionError("teacher forcing needs a non-empty prompt")

    prefix = assembly.embeddings
    inputs = torch.cat([prefix, answer_embeddings[:-1].to(prefix.dtype)], dim=0)
    logits = decoder.forward_logits(inputs)
    start = prefix.shape[0] - 1
    log_probs = F.log_softmax(logits[start: start + len(ids)], dim=-1)
    targets = torch.tensor(ids, dtype=torch.long)
    return -log_probs[torch.arange(len(ids)), targets].sum()
