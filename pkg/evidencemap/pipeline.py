"""Model configuration and the assembled encoder/MLP/decoder stack."""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

import torch
from torch import nn

from evidencemap.analysis import PromptTemplates, SummarizerMLP, build_analysis
from evidencemap.backends import (
    DecoderBackend,
    EncoderBackend,
    FastWeightDecoder,
    MockEncoder,
    MockSpec,
    PretrainedDecoder,
    PretrainedEncoder,
    TinyCausalDecoder,
    WordVocab,
    parse_backend_key,
)
from evidencemap.core_types import AnalysisBundle, AnalysisFlags, EvidenceMapRecord, QAOutput
from evidencemap.errors import ConfigError, ModelError
from evidencemap.generation import (
    ProjectorMLP,
    PromptAssembly,
    analysis_roles,
    assemble_prompt,
    embed_text,
    generate_answer,
    project_analysis,
    sequence_loss,
)

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}

# Fields that do not change parameter shapes
_HASH_EXCLUDED = {"seed"}


@dataclass
class ModelConfig:
    encoder: str = "mock"
    decoder: str = "mock"
    seed: int = 0
    encoder_dim: int = 32
    encoder_buckets: int = 2048
    encoder_max_context: int = 1024
    decoder_dim: int = 1024
    decoder_key_dim: int = 16
    vocab_size: int = 512
    decoder_layers: int = 2
    decoder_heads: int = 2
    summarizer_hidden: int = 64
    summarizer_layers: int = 2
    projector_hidden: int = 256
    projector_layers: int = 2
    max_slots: int = 6
    dtype: str = "float64"

    def validate(self) -> "ModelConfig":
        errors = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type in ("int", int) and f.name != "seed" and value < 1:
                errors.append(f"{f.name} must be positive, got {value}")
        if self.dtype not in DTYPES:
            errors.append(f"dtype must be one of {', '.join(DTYPES)}, got {self.dtype!r}")
        kinds = {}
        for role, key in (("encoder", self.encoder), ("decoder", self.decoder)):
            try:
                kinds[role] = parse_backend_key(key)
            except ModelError:
                errors.append(f"unknown {role} backend key {key!r}")
        if kinds.get("encoder", ("", ""))[0] == "mock" and kinds["encoder"][1]:
            errors.append(f"mock encoder has no variants, got {self.encoder!r}")
        if any(kind == "mock" for kind, _ in kinds.values()) and self.dtype != "float64":
            errors.append("mock backends run in float64")
        variant = kinds.get("decoder", ("", ""))
        if variant == ("mock", "transformer") and self.decoder_heads >= 1 and self.decoder_dim % self.decoder_heads:
            errors.append(f"decoder_dim {self.decoder_dim} is not divisible by decoder_heads {self.decoder_heads}")
        if variant in (("mock", ""), ("mock", "fastweight")) and self.decoder_key_dim >= 1 \
                and self.decoder_dim % self.decoder_key_dim:
            errors.append(f"decoder_dim {self.decoder_dim} is not divisible by decoder_key_dim {self.decoder_key_dim}")
        if errors:
            raise ConfigError("Invalid model configuration:\n" + "\n".join(errors))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    def config_hash(self, flags: Optional[AnalysisFlags] = None) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _HASH_EXCLUDED}
        payload["flags"] = (flags or AnalysisFlags()).to_dict()
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class EvidenceMapStack:
    config: ModelConfig
    flags: AnalysisFlags
    encoder: EncoderBackend
    decoder: DecoderBackend
    summarizer: SummarizerMLP
    projector: ProjectorMLP
    templates: PromptTemplates = field(default_factory=PromptTemplates)
    vocab: Optional[WordVocab] = None
    max_new_tokens: int = 64

    def trainable_modules(self) -> nn.ModuleDict:
        """Everything the optimizer updates; the decoder is never part of it."""
        return nn.ModuleDict({"encoder": self.encoder, "summarizer": self.summarizer, "projector": self.projector})

    def config_hash(self) -> str:
        return self.config.config_hash(self.flags)

    def analyze(self, record: EvidenceMapRecord) -> AnalysisBundle:
        return build_analysis(record, self.encoder, self.templates, self.summarizer, self.flags)

    def assemble(self, record: EvidenceMapRecord, bundle: Optional[AnalysisBundle] = None,
                 reserve_tokens: int = 0) -> PromptAssembly:
        bundle = bundle if bundle is not None else self.analyze(record)
        h_analysis = project_analysis(bundle, self.projector).to(self.decoder.dtype)
        max_tokens = None
        if self.decoder.max_context:
            max_tokens = max(1, self.decoder.max_context - h_analysis.shape[0] - reserve_tokens)
        h_text = embed_text(record, self.decoder, self.flags, max_tokens=max_tokens)
        return assemble_prompt(h_analysis, h_text, analysis_roles(bundle))

    def answer_ids(self, answer: str) -> List[int]:
        return self.decoder.tokenize(answer) + [self.decoder.eos_id]

    def loss(self, record: EvidenceMapRecord, answer_ids: Optional[List[int]] = None) -> torch.Tensor:
        ids = answer_ids if answer_ids is not None else self.answer_ids(record.reference_answer)
        assembly = self.assemble(record, reserve_tokens=len(ids))
        return sequence_loss(assembly, ids, self.decoder)

    @torch.no_grad()
    def answer(self, record: EvidenceMapRecord, max_new_tokens: Optional[int] = None) -> QAOutput:
        budget = max_new_tokens or self.max_new_tokens
        assembly = self.assemble(record, reserve_tokens=budget)
        return generate_answer(assembly, self.decoder, budget, record_id=record.id)


def build_encoder(config: ModelConfig) -> EncoderBackend:
    kind, model_id = parse_backend_key(config.encoder)
    if kind == "mock":
        return MockEncoder(MockSpec(seed=config.seed, dim=config.encoder_dim),
                           buckets=config.encoder_buckets, max_context=config.encoder_max_context)
    return PretrainedEncoder(model_id, dtype=DTYPES[config.dtype], max_context=config.encoder_max_context)


def build_decoder(config: ModelConfig, vocab: Optional[WordVocab] = None) -> DecoderBackend:
    kind, model_id = parse_backend_key(config.decoder)
    if kind == "mock":
        spec = MockSpec(seed=config.seed + 1, dim=config.decoder_dim, vocab_size=config.vocab_size)
        if model_id == "transformer":
            return TinyCausalDecoder(spec, vocab, n_layers=config.decoder_layers, n_heads=config.decoder_heads)
        return FastWeightDecoder(spec, vocab, key_dim=config.decoder_key_dim)
    return PretrainedDecoder(model_id, dtype=DTYPES[config.dtype])


def build_stack(config: ModelConfig, flags: Optional[AnalysisFlags] = None, vocab: Optional[WordVocab] = None,
                templates: Optional[PromptTemplates] = None, max_new_tokens: int = 64) -> EvidenceMapStack:
    """Seeded construction: one seed fixes every initial weight of the stack."""
    config.validate()
    flags = flags or AnalysisFlags()
    dtype = DTYPES[config.dtype]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        encoder = build_encoder(config)
        decoder = build_decoder(config, vocab)
        summarizer = SummarizerMLP(encoder.hidden_dim, config.max_slots, config.summarizer_hidden,
                                   config.summarizer_layers, dtype=dtype)
        projector = ProjectorMLP(encoder.hidden_dim, decoder.embed_dim, config.projector_hidden,
                                 config.projector_layers, mode="mlp" if flags.mlp_projector else "linear",
                                 dtype=dtype)

    logger.debug("Built stack %s (flags: %s)", config.config_hash(flags)[:12], ",".join(flags.enabled_names()))
    return EvidenceMapStack(config=config, flags=flags, encoder=encoder, decoder=decoder, summarizer=summarizer,
                            projector=projector, templates=templates or PromptTemplates(), vocab=vocab,
                            max_new_tokens=max_new_tokens)
