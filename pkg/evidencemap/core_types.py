"""
Evidence-map data model shared by every pipeline stage.

A record holds one question, its ordered evidence (LLM key points first, then
paper snippets in dataset order) and the reference answer. Analysis results
and generation outputs are plain immutable values as well.
"""

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import torch

from evidencemap.errors import NonFiniteValue, UnknownFlagError, ValidationError


class EvidenceSource(str, Enum):
    PAPER = "paper"
    LLM = "llm"


@dataclass(frozen=True)
class EvidenceItem:
    id: str
    source: EvidenceSource
    text: str

    def to_dict(self) -> dict:
        return {"id": self.id, "source": self.source.value, "text": self.text}

    @classmethod
    def from_dict(cls, data: dict) -> "EvidenceItem":
        try:
            source = EvidenceSource(data.get("source", "paper"))
        except ValueError as exc:
            raise ValidationError(f"unknown evidence source {data.get('source')!r}", "evidence.source") from exc
        return cls(id=str(data.get("id", "")), source=source, text=str(data.get("text", "")))


@dataclass(frozen=True)
class EvidenceMapRecord:
    id: str
    question: str
    evidence: Tuple[EvidenceItem, ...]
    reference_answer: str = ""
    dataset_id: str = ""

    @property
    def llm_evidence(self) -> Optional[EvidenceItem]:
        for item in self.evidence:
            if item.source is EvidenceSource.LLM:
                return item
        return None

    @property
    def paper_evidence(self) -> Tuple[EvidenceItem, ...]:
        return tuple(item for item in self.evidence if item.source is EvidenceSource.PAPER)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "reference_answer": self.reference_answer,
            "evidence": [item.to_dict() for item in self.evidence],
            "dataset_id": self.dataset_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvidenceMapRecord":
        evidence = data.get("evidence") or []
        if not isinstance(evidence, list):
            raise ValidationError("evidence must be a list", "evidence", str(data.get("id", "")) or None)
        return cls(
            id=str(data.get("id", "")),
            question=str(data.get("question", "")),
            evidence=tuple(EvidenceItem.from_dict(item) for item in evidence),
            reference_answer=str(data.get("reference_answer") or ""),
            dataset_id=str(data.get("dataset_id") or ""),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    def to_bytes(self) -> bytes:
        return self.to_json().encode("utf-8")

    @classmethod
    def from_bytes(cls, payload: bytes) -> "EvidenceMapRecord":
        return cls.from_dict(json.loads(payload.decode("utf-8")))


# -------------------- Flags --------------------
# Short CLI names -> AnalysisFlags field names
FLAG_NAMES = {
    "eval": "eval",
    "cor": "cor",
    "sum": "sum",
    "te": "text_evidence",
    "ea": "analysis",
    "proj": "mlp_projector",
}

ARM_LABELS = {
    "eval": "w/o Eval",
    "cor": "w/o Cor",
    "sum": "w/o Sum",
    "te": "w/o TE",
    "ea": "w/o EA",
    "proj": "w/o Proj",
}


@dataclass(frozen=True)
class AnalysisFlags:
    eval: bool = True
    cor: bool = True
    sum: bool = True
    text_evidence: bool = True
    analysis: bool = True
    mlp_projector: bool = True

    def effective(self) -> "AnalysisFlags":
        """analysis=False switches every analysis component off."""
        if self.analysis:
            return self
        return replace(self, eval=False, cor=False, sum=False)

    def without(self, short_name: str) -> "AnalysisFlags":
        return replace(self, **{_field_for(short_name): False})

    @classmethod
    def from_names(cls, enabled: Iterable[str]) -> "AnalysisFlags":
        wanted = {_field_for(name) for name in enabled}
        return cls(**{name: (name in wanted) for name in FLAG_NAMES.values()})

    def enabled_names(self) -> List[str]:
        return [short for short, name in FLAG_NAMES.items() if getattr(self, name)]

    def to_dict(self) -> Dict[str, bool]:
        return {name: getattr(self, name) for name in FLAG_NAMES.values()}


def _field_for(short_name: str) -> str:
    key = short_name.strip().lower()
    if key in FLAG_NAMES:
        return FLAG_NAMES[key]
    if key in FLAG_NAMES.values():
        return key
    raise UnknownFlagError(f"unknown flag name {short_name!r}; expected one of {', '.join(FLAG_NAMES)}")


# -------------------- Analysis bundle --------------------
@dataclass(frozen=True)
class AnalysisBundle:
    summary: Optional[torch.Tensor]
    eval_vectors: Tuple[Tuple[str, torch.Tensor], ...]
    cor_vectors: Tuple[Tuple[Tuple[str, str], torch.Tensor], ...]
    flags: AnalysisFlags = field(default_factory=AnalysisFlags)

    def __post_init__(self) -> None:
        for name, vector in self.vectors_with_roles():
            if not bool(torch.isfinite(vector).all()):
                raise NonFiniteValue(f"non-finite {name} vector in analysis bundle")

    def vectors_with_roles(self) -> List[Tuple[str, torch.Tensor]]:
        """Analysis vectors in prompt order: summary, eval, cor."""
        rows: List[Tuple[str, torch.Tensor]] = []
        if self.summary is not None:
            rows.append(("summary", self.summary))
        rows.extend(("eval", vector) for _, vector in self.eval_vectors)
        rows.extend(("cor", vector) for _, vector in self.cor_vectors)
        return rows

    def __len__(self) -> int:
        return len(self.vectors_with_roles())


@dataclass(frozen=True)
class QAOutput:
    record_id: str
    generated_answer: str
    token_count: int

    def to_dict(self) -> dict:
        return {"id": self.record_id, "answer": self.generated_answer, "token_count": self.token_count}


# -------------------- Operations --------------------
def validate_record(record: EvidenceMapRecord, training: bool = False) -> EvidenceMapRecord:
    """Return the record unchanged if every invariant holds."""
    rid = record.id or None
    if not record.question.strip():
        raise ValidationError("question empty", "question", rid)
    if training and not record.evidence:
        raise ValidationError("evidence empty for training record", "evidence", rid)

    seen = set()
    llm_count = 0
    for position, item in enumerate(record.evidence):
        if not item.text.strip():
            raise ValidationError("evidence text empty", f"evidence[{position}].text", rid)
        if item.id in seen:
            raise ValidationError("duplicate id", f"evidence[{position}].id", rid)
        seen.add(item.id)
        if item.source is EvidenceSource.LLM:
            llm_count += 1
    if llm_count > 1:
        raise ValidationError("more than one llm evidence item", "evidence", rid)
    return record


def pair_index_list(m: int) -> List[Tuple[int, int]]:
    """All position pairs (i, j) with i < j, in lexicographic order."""
    if m < 1:
        raise ValueError(f"m must be positive, got {m}")
    return [(i, j) for i in range(m) for j in range(i + 1, m)]


def canonical_order(evidence: Iterable[EvidenceItem]) -> Tuple[EvidenceItem, ...]:
    """LLM evidence first, then paper evidence in its original order."""
    items = list(evidence)
    llm = [item for item in items if item.source is EvidenceSource.LLM]
    paper = [item for item in items if item.source is EvidenceSource.PAPER]
    return tuple(llm + paper)

