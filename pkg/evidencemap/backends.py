"""
Encoder and decoder backends.

The pipeline only sees two interfaces: an EncoderBackend that turns prompt text
into per-token hidden states, and a frozen DecoderBackend that embeds tokens,
scores next tokens and decodes greedily. Seeded mock implementations make the
whole pipeline runnable on a laptop CPU; pretrained adapters load
``transformers`` checkpoints behind the same interface.
"""

import hashlib
import logging
import math
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from evidencemap.errors import (
    DimensionMismatch,
    IdOutOfRange,
    ModelError,
    PreconditionError,
    TokenizationError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MockSpec:
    seed: int
    dim: int
    vocab_size: int = 0


@dataclass
class EncodedText:
    states: torch.Tensor
    token_ids: List[int]
    pooled_index: int
    truncated: bool = False


# -------------------- Vocabulary --------------------
class WordVocab:
    """Whitespace word vocabulary for the mock decoders."""

    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, words: Sequence[str] = ()):
        self.itos: List[str] = list(self.SPECIALS) + [w for w in words if w not in self.SPECIALS]
        self.stoi: Dict[str, int] = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int) -> "WordVocab":
        if max_size < len(cls.SPECIALS):
            raise PreconditionError(f"vocabulary size must be at least {len(cls.SPECIALS)}")
        counts = Counter(word for text in texts for word in text.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([word for word, _ in ranked[: max_size - len(cls.SPECIALS)]])

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> List[int]:
        return [self.stoi.get(word, self.UNK) for word in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            if i in (self.PAD, self.BOS, self.EOS):
                continue
            words.append(self.itos[i] if 0 <= i < len(self.itos) else f"tok{i}")
        return " ".join(words)

    def to_dict(self) -> dict:
        return {"words": self.itos[len(self.SPECIALS):]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "WordVocab":
        return cls(list(data.get("words", [])))


def _seeded_normal(generator: torch.Generator, *shape: int, std: float = 1.0) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=torch.float64) * std


# -------------------- Encoders --------------------
def share_budget(lengths: Sequence[int], budget: int) -> List[int]:
    """
    Token allowance per truncatable piece, summing to at most budget.

    Pieces shorter than an even share keep every token and hand what they do
    not use to the longer ones.
    """
    allowed = list(lengths)
    if sum(allowed) <= budget:
        return allowed
    remaining, left = budget, len(allowed)
    for i in sorted(range(len(allowed)), key=lambda k: allowed[k]):
        allowed[i] = min(lengths[i], remaining // left)
        remaining -= allowed[i]
        left -= 1
    return allowed


@lru_cache(maxsize=65536)
def _word_bucket(word: str, buckets: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


class EncoderBackend(nn.Module, ABC):
    hidden_dim: int
    max_context: int

    @abstractmethod
    def tokenize(self, text: str) -> List[int]:
        """Token ids for text, without special tokens."""

    @abstractmethod
    def forward_ids(self, token_ids: List[int]) -> torch.Tensor:
        """Final-layer states [len(token_ids) x hidden_dim]."""

    def encode(self, prompt_text: str) -> EncodedText:
        """Encode plain text; past max_context its token tail is dropped."""
        return self.encode_segments([(prompt_text, True)])

    def encode_segments(self, segments: Sequence[Tuple[str, bool]]) -> EncodedText:
        """
        Encode a prompt given as ordered (text, truncatable) pieces.

        Fixed pieces are always kept whole. When the prompt exceeds
        max_context the remaining budget is shared across the truncatable
        pieces, each keeping its head, so the question and the trailing cue
        survive and the pooled position always lands on the cue.
        """
        if not "".join(text for text, _ in segments).strip():
            raise TokenizationError("empty input")

        pieces = [(self.tokenize(text), cut) for text, cut in segments]
        budget = self.max_context - sum(len(ids) for ids, cut in pieces if not cut)
        if budget < 0:
            raise TokenizationError(f"fixed prompt text alone exceeds max_context={self.max_context}")
        lengths = [len(ids) for ids, cut in pieces if cut]
        allowed = iter(share_budget(lengths, budget))
        truncated = sum(lengths) > budget
        if truncated:
            logger.debug("Truncating %d evidence tokens to a budget of %d", sum(lengths), budget)

        token_ids: List[int] = []
        for ids, cut in pieces:
            token_ids.extend(ids[: next(allowed)] if cut else ids)
        if not token_ids:
            raise TokenizationError("input produced no tokens")
        states = self.forward_ids(token_ids)
        return EncodedText(states=states, token_ids=token_ids,
                           pooled_index=len(token_ids) - 1, truncated=truncated)


class MockEncoder(EncoderBackend):
    """
    Word-level trainable encoder.

    Each whitespace word is hashed into a bucket; the state at position t is
    an affine map of the running sum of the position-aware word embeddings,
    scaled by 1/sqrt(t), so the final position summarises the whole prompt
    and distinct content words stay visible next to the shared template.
    """

    def __init__(self, spec: MockSpec, buckets: int = 2048, max_context: int = 1024):
        super().__init__()
        if spec.dim < 1 or buckets < 1 or max_context < 1:
            raise PreconditionError("encoder dims must be positive")
        self.spec = spec
        self.hidden_dim = spec.dim
        self.max_context = max_context
        self.buckets = buckets

        g = torch.Generator().manual_seed(spec.seed)
        d = spec.dim
        self.token_embedding = nn.Parameter(_seeded_normal(g, buckets, d))
        self.position_embedding = nn.Parameter(_seeded_normal(g, max_context, d, std=0.1))
        self.mix_weight = nn.Parameter(_seeded_normal(g, d, d, std=1.0 / math.sqrt(d)))
        self.mix_bias = nn.Parameter(_seeded_normal(g, d, std=0.1))

    def tokenize(self, text: str) -> List[int]:
        return [_word_bucket(word, self.buckets) for word in text.split()]

    def forward_ids(self, token_ids: List[int]) -> torch.Tensor:
        ids = torch.tensor(token_ids, dtype=torch.long)
        n = ids.shape[0]
        x = self.token_embedding[ids] + self.position_embedding[:n]
        counts = torch.arange(1, n + 1, dtype=x.dtype).unsqueeze(1)
        running = torch.cumsum(x, dim=0) / torch.sqrt(counts)
        return running @ self.mix_weight.T + self.mix_bias


class PretrainedEncoder(EncoderBackend):
    """Any ``transformers`` encoder or decoder-only model used as an encoder."""

    def __init__(self, model_id: str, dtype: torch.dtype = torch.float32, max_context: Optional[int] = None):
        super().__init__()
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise ModelError("pretrained backends need the 'pretrained' extra (transformers)") from exc

        self.model_id = model_id
        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.model = AutoModel.from_pretrained(model_id, torch_dtype=dtype)
        self.hidden_dim = int(self.model.config.hidden_size)
        # Tokenizers without a limit report a huge model_max_length
        limit = int(getattr(self.tokenizer, "model_max_length", 0) or 512)
        positions = int(getattr(self.model.config, "max_position_embeddings", 0) or limit)
        ceiling = min(limit, positions)
        reserved = self.tokenizer.num_special_tokens_to_add(pair=False)
        self.max_context = min(max_context or ceiling, ceiling) - reserved
        if self.max_context < 1:
            raise ModelError(f"encoder {model_id} leaves no room for prompt tokens")
        logger.info("Loaded encoder %s (d_e=%d, context=%d)", model_id, self.hidden_dim, self.max_context)

    def tokenize(self, text: str) -> List[int]:
        return list(self.tokenizer(text, add_special_tokens=False)["input_ids"])

    def forward_ids(self, token_ids: List[int]) -> torch.Tensor:
        full = self.tokenizer.build_inputs_with_special_tokens(token_ids)
        special = self.tokenizer.get_special_tokens_mask(full, already_has_special_tokens=True)
        out = self.model(input_ids=torch.tensor([full], dtype=torch.long)).last_hidden_state[0]
        keep = torch.tensor([s == 0 for s in special], dtype=torch.bool)
        return out[keep]


# -------------------- Decoders --------------------
class DecoderBackend(nn.Module, ABC):
    embed_dim: int
    vocab_size: int
    max_context: Optional[int] = None

    @abstractmethod
    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        ...

    @abstractmethod
    def _logits(self, inputs: torch.Tensor) -> torch.Tensor:
        ...

    @abstractmethod
    def tokenize(self, text: str) -> List[int]:
        ...

    @abstractmethod
    def detokenize(self, token_ids: Sequence[int]) -> str:
        ...

    @property
    @abstractmethod
    def eos_id(self) -> int:
        ...

    @property
    def control_ids(self) -> frozenset:
        return frozenset({self.eos_id})

    def embed_tokens(self, token_ids: Sequence[int]) -> torch.Tensor:
        """Plain token-embedding lookup; positions are added in forward_logits."""
        ids = list(token_ids)
        bad = [i for i in ids if not 0 <= int(i) < self.vocab_size]
        if bad:
            raise IdOutOfRange(f"token id {bad[0]} outside vocabulary of size {self.vocab_size}")
        if not ids:
            return torch.zeros(0, self.embed_dim, dtype=self.dtype)
        return self._embed(torch.tensor(ids, dtype=torch.long))

    def forward_logits(self, input_embeddings: torch.Tensor) -> torch.Tensor:
        if input_embeddings.dim() != 2 or input_embeddings.shape[1] != self.embed_dim:
            raise DimensionMismatch(
                f"decoder expects [T x {self.embed_dim}] inputs, got {tuple(input_embeddings.shape)}")
        if input_embeddings.shape[0] < 1:
            raise PreconditionError("forward_logits needs at least one input row")
        return self._logits(input_embeddings)

    @torch.no_grad()
    def generate(self, input_embeddings: torch.Tensor, max_new_tokens: int) -> List[int]:
        """Greedy decoding; the returned ids include the end-of-sequence token if reached."""
        if max_new_tokens < 1:
            raise PreconditionError("max_new_tokens must be at least 1")
        context = input_embeddings.detach()
        produced: List[int] = []
        for _ in range(max_new_tokens):
            logits = self.forward_logits(context)
            next_id = int(torch.argmax(logits[-1]).item())
            produced.append(next_id)
            if next_id == self.eos_id:
                break
            context = torch.cat([context, self.embed_tokens([next_id])], dim=0)
        return produced

    @property
    def dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return torch.float64

    def freeze(self) -> "DecoderBackend":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            digest.update(name.encode("utf-8"))
            digest.update(p.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


class _VocabDecoder(DecoderBackend):
    """Shared plumbing for the mock decoders built over a WordVocab."""

    def __init__(self, spec: MockSpec, vocab: Optional[WordVocab] = None):
        super().__init__()
        if spec.dim < 1 or spec.vocab_size < len(WordVocab.SPECIALS):
            raise PreconditionError("decoder dims must be positive and vocab must hold the specials")
        self.spec = spec
        self.embed_dim = spec.dim
        self.vocab_size = spec.vocab_size
        self.vocab = vocab or WordVocab()
        if len(self.vocab) > self.vocab_size:
            raise PreconditionError(f"vocabulary of {len(self.vocab)} words exceeds vocab_size={self.vocab_size}")

    def tokenize(self, text: str) -> List[int]:
        return self.vocab.encode(text)

    def detokenize(self, token_ids: Sequence[int]) -> str:
        return self.vocab.decode(token_ids)

    @property
    def eos_id(self) -> int:
        return WordVocab.EOS

    @property
    def control_ids(self) -> frozenset:
        return frozenset({WordVocab.PAD, WordVocab.BOS, WordVocab.EOS})


class _CausalBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.attn_norm = nn.RMSNorm(dim, dtype=torch.float64)
        self.qkv = nn.Linear(dim, 3 * dim, dtype=torch.float64)
        self.out = nn.Linear(dim, dim, dtype=torch.float64)
        self.mlp_norm = nn.RMSNorm(dim, dtype=torch.float64)
        self.up = nn.Linear(dim, 4 * dim, dtype=torch.float64)
        self.down = nn.Linear(4 * dim, dim, dtype=torch.float64)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t, d = x.shape
        q, k, v = self.qkv(self.attn_norm(x)).split(d, dim=-1)
        q, k, v = (z.view(t, self.heads, d // self.heads).transpose(0, 1) for z in (q, k, v))
        attn = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + self.out(attn.transpose(0, 1).reshape(t, d))
        return x + self.down(F.relu(self.up(self.mlp_norm(x))))


def sinusoidal_positions(length: int, dim: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    position = torch.arange(length, dtype=dtype).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div)[:, : dim // 2]
    return table


class TinyCausalDecoder(_VocabDecoder):
    """Seeded pre-norm transformer decoder, frozen at construction."""

    def __init__(self, spec: MockSpec, vocab: Optional[WordVocab] = None,
                 n_layers: int = 2, n_heads: int = 2, max_context: int = 2048):
        super().__init__(spec, vocab)
        if spec.dim % n_heads:
            raise PreconditionError(f"decoder_dim {spec.dim} not divisible by {n_heads} heads")
        self.max_context = max_context
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            self.token_embedding = nn.Embedding(spec.vocab_size, spec.dim, dtype=torch.float64)
            self.blocks = nn.ModuleList(_CausalBlock(spec.dim, n_heads) for _ in range(n_layers))
            self.final_norm = nn.RMSNorm(spec.dim, dtype=torch.float64)
            self.lm_head = nn.Linear(spec.dim, spec.vocab_size, bias=False, dtype=torch.float64)
            nn.init.normal_(self.lm_head.weight, std=1.0 / math.sqrt(spec.dim))
        self.freeze()

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(ids)

    def _logits(self, inputs: torch.Tensor) -> torch.Tensor:
        x = inputs + sinusoidal_positions(inputs.shape[0], self.embed_dim, inputs.dtype)
        for block in self.blocks:
            x = block(x)
        return self.lm_head(self.final_norm(x))


class FastWeightDecoder(_VocabDecoder):
    """
    Seeded fast-weight reader, frozen at construction.

    Every input row is read as a flattened value_dim x key_dim matrix. The
    causal running sum of those matrices maps the current row's query (a fixed
    projection of the row, scaled to unit RMS) to output features, whose
    direction is scored against a fixed readout table. Token embeddings are
    small, so rows written by a trainable prefix dominate what later positions
    read.
    """

    def __init__(self, spec: MockSpec, vocab: Optional[WordVocab] = None, key_dim: int = 16,
                 max_context: int = 2048, embedding_std: float = 0.02):
        super().__init__(spec, vocab)
        if key_dim < 1 or spec.dim % key_dim:
            raise PreconditionError(f"decoder_dim {spec.dim} not divisible by key_dim {key_dim}")
        self.key_dim = key_dim
        self.value_dim = spec.dim // key_dim
        self.max_context = max_context

        g = torch.Generator().manual_seed(spec.seed)
        self.token_embedding = nn.Parameter(_seeded_normal(g, spec.vocab_size, spec.dim, std=embedding_std))
        self.query = nn.Parameter(_seeded_normal(g, key_dim, spec.dim, std=1.0 / math.sqrt(spec.dim)))
        self.readout = nn.Parameter(_seeded_normal(g, spec.vocab_size, self.value_dim))
        self.freeze()

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding[ids]

    def _logits(self, inputs: torch.Tensor) -> torch.Tensor:
        t = inputs.shape[0]
        memory = torch.cumsum(inputs.reshape(t, self.value_dim, self.key_dim), dim=0)
        query = F.normalize(inputs @ self.query.T, dim=-1) * math.sqrt(self.key_dim)
        read = torch.einsum("tvk,tk->tv", memory, query)
        return F.normalize(read, dim=-1) @ self.readout.T


class UniformDecoder(_VocabDecoder):
    """Every position gets identical zero logits."""

    def __init__(self, spec: MockSpec, vocab: Optional[WordVocab] = None):
        super().__init__(spec, vocab)
        g = torch.Generator().manual_seed(spec.seed)
        self.token_embedding = nn.Parameter(_seeded_normal(g, spec.vocab_size, spec.dim), requires_grad=False)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding[ids]

    def _logits(self, inputs: torch.Tensor) -> torch.Tensor:
        return torch.zeros(inputs.shape[0], self.vocab_size, dtype=inputs.dtype)


class TableDecoder(UniformDecoder):
    """Emits a fixed id per row position, or ``default_id`` for rows not in the table."""

    def __init__(self, spec: MockSpec, default_id: int, table: Optional[Mapping[int, int]] = None,
                 vocab: Optional[WordVocab] = None, eos: int = WordVocab.EOS):
        super().__init__(spec, vocab)
        self.default_id = default_id
        self.table = dict(table or {})
        self._eos = eos

    @property
    def eos_id(self) -> int:
        return self._eos

    def _logits(self, inputs: torch.Tensor) -> torch.Tensor:
        logits = torch.zeros(inputs.shape[0], self.vocab_size, dtype=inputs.dtype)
        for row in range(inputs.shape[0]):
            logits[row, self.table.get(row, self.default_id)] = 10.0
        return logits


class PretrainedDecoder(DecoderBackend):
    """A ``transformers`` causal LM, frozen at load and driven through inputs_embeds."""

    def __init__(self, model_id: str, dtype: torch.dtype = torch.float32):
        super().__init__()
        try:
            from transformers import AutoModelForCausalLM, AutoTokenizer
        except ImportError as exc:
            raise ModelError("pretrained backends need the 'pretrained' extra (transformers)") from exc

        self.model_id = model_id
        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.model = AutoModelForCausalLM.from_pretrained(model_id, torch_dtype=dtype)
        self.embed_dim = int(self.model.get_input_embeddings().weight.shape[1])
        self.vocab_size = int(self.model.get_input_embeddings().weight.shape[0])
        self.max_context = int(getattr(self.model.config, "max_position_embeddings", 2048))
        self.freeze()
        logger.info("Loaded frozen decoder %s (d_g=%d, vocab=%d)", model_id, self.embed_dim, self.vocab_size)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.model.get_input_embeddings()(ids)

    def _logits(self, inputs: torch.Tensor) -> torch.Tensor:
        return self.model(inputs_embeds=inputs.unsqueeze(0)).logits[0]

    def tokenize(self, text: str) -> List[int]:
        return list(self.tokenizer(text, add_special_tokens=False)["input_ids"])

    def detokenize(self, token_ids: Sequence[int]) -> str:
        return self.tokenizer.decode(list(token_ids), skip_special_tokens=True).strip()

    @property
    def eos_id(self) -> int:
        return int(self.tokenizer.eos_token_id)

    @property
    def control_ids(self) -> frozenset:
        return frozenset(int(i) for i in self.tokenizer.all_special_ids)


# -------------------- Selection --------------------
MOCK_DECODERS = ("fastweight", "transformer")


def parse_backend_key(key: str) -> Tuple[str, str]:
    """
    Split a backend key into (kind, detail).

    "mock" and "mock:<variant>" give ("mock", variant or ""); the variants
    name the mock decoder. "pretrained:<model-id>" gives ("pretrained", id).
    """
    kind, _, detail = key.partition(":")
    if kind == "mock" and (not detail or detail in MOCK_DECODERS):
        return "mock", detail
    if kind == "pretrained" and detail:
        return "pretrained", detail
    raise ModelError(f"unknown backend key {key!r}; expected 'mock', 'mock:<{'|'.join(MOCK_DECODERS)}>' "
                     "or 'pretrained:<model-id>'")
