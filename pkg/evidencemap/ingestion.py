"""
Dataset loading and LLM evidence acquisition.

Accepts the canonical JSONL record format plus raw BioASQ- and PubMedQA-shaped
exports, normalizes them to EvidenceMapRecords, caps paper evidence and
attaches LLM key-point evidence from an on-disk completion cache.
"""

import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import pandas as pd

from evidencemap.core_types import (
    EvidenceItem,
    EvidenceMapRecord,
    EvidenceSource,
    canonical_order,
    validate_record,
)
from evidencemap.errors import CacheError, ConfigError, ParseError, PreconditionError, RemoteError, ValidationError
from evidencemap.remote import CompletionClient, complete_with_retry, request_hash

logger = logging.getLogger(__name__)

ACQUISITION_SYSTEM = "You are an AI assistant that helps a human analyst discover evidence that supports the question."
ACQUISITION_USER = (
    "Provide a concise summary that supports answering the question with your own knowledge. "
    "The summary should be evidence including key insights that can explain your answer to the question.\n"
    "Question: {question}\n"
    "Summary:"
)

LLM_EVIDENCE_ID = "llm"
MAX_ACQUIRE_WORKERS = 4


@dataclass
class IngestConfig:
    max_paper_evidence: int = 5
    include_llm_evidence: bool = True
    cache_dir: Path = Path(".evidencemap_cache")
    remote_model_name: str = "gpt-4o"
    remote_backend: str = "offline"
    attempts: int = 3
    backoff_seconds: float = 1.0
    concurrency: int = MAX_ACQUIRE_WORKERS

    def validate(self) -> "IngestConfig":
        errors = []
        if self.max_paper_evidence < 1:
            errors.append(f"max_paper_evidence must be at least 1, got {self.max_paper_evidence}")
        if self.attempts < 1:
            errors.append(f"attempts must be positive, got {self.attempts}")
        if self.concurrency < 1:
            errors.append(f"concurrency must be positive, got {self.concurrency}")
        if not self.remote_model_name:
            errors.append("remote_model_name must be set")
        if errors:
            raise ConfigError("Invalid ingestion configuration:\n" + "\n".join(errors))
        return self


@dataclass(frozen=True)
class AcquisitionRequest:
    question: str
    system_text: str
    user_text: str


def build_acquisition_request(question: str) -> AcquisitionRequest:
    if not question or not question.strip():
        raise PreconditionError("question must be non-empty")
    return AcquisitionRequest(
        question=question,
        system_text=ACQUISITION_SYSTEM,
        user_text=ACQUISITION_USER.replace("{question}", question),
    )


# -------------------- Cache --------------------
class EvidenceCache:
    """JSON file of {request_hash: completion} for one remote model."""

    def __init__(self, cache_dir: Path, model_name: str):
        self.model_name = model_name
        safe = re.sub(r"[^A-Za-z0-9._-]+", "_", model_name)
        self.path = Path(cache_dir) / f"llm_evidence_{safe}.json"
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()
        self._entries: Optional[Dict[str, str]] = None

    def _load(self) -> Dict[str, str]:
        if self._entries is None:
            if self.path.exists():
                try:
                    data = json.loads(self.path.read_text(encoding="utf-8"))
                except (OSError, ValueError) as exc:
                    raise CacheError(f"unreadable cache file {self.path}: {exc}") from exc
                if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
                    raise CacheError(f"cache file {self.path} is not a {{hash: text}} object")
                self._entries = data
            else:
                self._entries = {}
        return self._entries

    def key(self, request: AcquisitionRequest) -> str:
        return request_hash(self.model_name, request.system_text, request.user_text)

    def get(self, request: AcquisitionRequest, count: bool = True) -> Optional[str]:
        with self._lock:
            value = self._load().get(self.key(request))
            if count:
                if value is None:
                    self.misses += 1
                else:
                    self.hits += 1
            return value

    def put(self, request: AcquisitionRequest, completion: str) -> None:
        with self._lock:
            entries = self._load()
            entries[self.key(request)] = completion
            tmp = self.path.with_suffix(".json.tmp")
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                tmp.write_text(json.dumps(entries, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")
                os.replace(tmp, self.path)
            except OSError as exc:
                raise CacheError(f"cannot write cache file {self.path}: {exc}") from exc


# -------------------- Raw-export adapters --------------------
def _ideal_answer(value: Any) -> str:
    if isinstance(value, list):
        return str(value[0]) if value else ""
    return str(value or "")


def _paper_items(texts: Sequence[Any]) -> Tuple[EvidenceItem, ...]:
    items = []
    for text in texts:
        text = str(text or "")
        if not text.strip():
            continue
        items.append(EvidenceItem(id=f"p{len(items) + 1}", source=EvidenceSource.PAPER, text=text))
    return tuple(items)


def _from_bioasq(obj: Dict[str, Any], fallback_id: str) -> EvidenceMapRecord:
    snippets = obj.get("snippets") or []
    texts = [s.get("text", "") if isinstance(s, dict) else s for s in snippets]
    return EvidenceMapRecord(
        id=str(obj.get("id") or fallback_id),
        question=str(obj.get("body", "")),
        evidence=_paper_items(texts),
        reference_answer=_ideal_answer(obj.get("ideal_answer")),
        dataset_id="bioasq",
    )


def _from_pubmedqa(obj: Dict[str, Any], fallback_id: str) -> EvidenceMapRecord:
    return EvidenceMapRecord(
        id=str(obj.get("id") or fallback_id),
        question=str(obj.get("QUESTION", "")),
        evidence=_paper_items(obj.get("CONTEXTS") or []),
        reference_answer=str(obj.get("LONG_ANSWER") or ""),
        dataset_id="pubmedqa",
    )


def normalize_object(obj: Any, fallback_id: str, line: Optional[int] = None, path: str = "") -> EvidenceMapRecord:
    """Map one canonical, BioASQ or PubMedQA object to a record."""
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", line, path)
    try:
        if "QUESTION" in obj:
            return _from_pubmedqa(obj, fallback_id)
        if "body" in obj:
            return _from_bioasq(obj, fallback_id)
        if "question" in obj:
            record = EvidenceMapRecord.from_dict(obj)
            return record if record.id else replace(record, id=fallback_id)
    except ValidationError:
        raise
    except (TypeError, AttributeError) as exc:
        raise ParseError(f"malformed record: {exc}", line, path) from exc
    raise ParseError("unrecognized record shape (expected question, body or QUESTION)", line, path)


def _iter_objects(text: str, path: str) -> Iterator[Tuple[Any, str, Optional[int]]]:
    stripped = text.lstrip("\ufeff").strip()
    document = None
    if stripped[:1] in ("{", "["):
        try:
            document = json.loads(stripped)
        except ValueError:
            document = None

    if isinstance(document, dict) and isinstance(document.get("questions"), list):
        for k, obj in enumerate(document["questions"], start=1):
            yield obj, f"q{k}", None
        return
    if isinstance(document, dict) and document and all(
            isinstance(v, dict) and "QUESTION" in v for v in document.values()):
        for pmid, obj in document.items():
            yield dict(obj, id=obj.get("id") or pmid), str(pmid), None
        return
    if isinstance(document, list):
        for k, obj in enumerate(document, start=1):
            yield obj, f"r{k}", None
        return

    for number, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except ValueError as exc:
            raise ParseError(f"invalid JSON: {exc}", number, path) from exc
        yield obj, f"r{number}", number


def load_dataset(path: Path, config: Optional[IngestConfig] = None,
                 cache: Optional[EvidenceCache] = None) -> List[EvidenceMapRecord]:
    """
    Load and validate records.

    Paper evidence is capped to the first ``max_paper_evidence`` snippets in
    dataset order. With ``include_llm_evidence`` and a cache, cached key points
    are attached; without ``include_llm_evidence`` any LLM item is dropped.
    """
    config = (config or IngestConfig()).validate()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read dataset: {exc}", path=str(path)) from exc

    records: List[EvidenceMapRecord] = []
    seen_ids = set()
    for obj, fallback_id, line in _iter_objects(text, str(path)):
        record = normalize_object(obj, fallback_id, line, str(path))
        if not record.dataset_id:
            record = replace(record, dataset_id=path.stem)

        llm = record.llm_evidence if config.include_llm_evidence else None
        if llm is None and config.include_llm_evidence and cache is not None and record.question.strip():
            cached = cache.get(build_acquisition_request(record.question), count=False)
            if cached is not None:
                llm = EvidenceItem(id=LLM_EVIDENCE_ID, source=EvidenceSource.LLM, text=cached.strip())
        paper = record.paper_evidence[: config.max_paper_evidence]
        record = replace(record, evidence=canonical_order(((llm,) if llm else ()) + paper))

        try:
            validate_record(record)
        except ValidationError as exc:
            if exc.record_id is None:
                raise exc.with_record(record.id) from exc
            raise

        if record.id in seen_ids:
            logger.warning("Duplicate record id %s in %s", record.id, path, extra={"record_id": record.id})
        seen_ids.add(record.id)
        records.append(record)

    logger.info("Loaded %d records from %s", len(records), path)
    return records


# -------------------- Acquisition --------------------
def acquire_llm_evidence(record: EvidenceMapRecord, client: CompletionClient, config: IngestConfig,
                         cache: Optional[EvidenceCache] = None) -> EvidenceMapRecord:
    """Prepend LLM key-point evidence, served from the cache when possible."""
    if record.llm_evidence is not None:
        return record
    cache = cache or EvidenceCache(config.cache_dir, config.remote_model_name)
    request = build_acquisition_request(record.question)

    completion = cache.get(request)
    if completion is None:
        completion = complete_with_retry(client, request.system_text, request.user_text,
                                         attempts=config.attempts, backoff_seconds=config.backoff_seconds)
        if not completion or not completion.strip():
            raise RemoteError("empty completion")
        cache.put(request, completion)

    item = EvidenceItem(id=LLM_EVIDENCE_ID, source=EvidenceSource.LLM, text=completion.strip())
    return validate_record(replace(record, evidence=(item,) + tuple(record.evidence)))


def acquire_all(records: Sequence[EvidenceMapRecord], client: CompletionClient, config: IngestConfig,
                cache: Optional[EvidenceCache] = None) -> Tuple[List[EvidenceMapRecord], Dict[str, int]]:
    """Acquire for every record with bounded parallelism; results keep input order."""
    if not config.include_llm_evidence:
        logger.info("LLM evidence disabled; nothing to acquire")
        return list(records), {"records": len(records), "hits": 0, "misses": 0, "skipped": len(records)}

    cache = cache or EvidenceCache(config.cache_dir, config.remote_model_name)
    workers = max(1, min(config.concurrency, MAX_ACQUIRE_WORKERS))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda r: acquire_llm_evidence(r, client, config, cache), records))

    skipped = len(records) - cache.hits - cache.misses
    summary = {"records": len(records), "hits": cache.hits, "misses": cache.misses, "skipped": skipped}
    logger.info("Acquired LLM evidence: %d hits, %d misses, %d already present", cache.hits, cache.misses, skipped)
    return results, summary


def dataset_statistics(records: Sequence[EvidenceMapRecord]) -> Dict[str, float]:
    """Sample count and paper evidence per sample."""
    if not records:
        return {"samples": 0, "evidence_per_sample": 0.0, "min_evidence": 0, "max_evidence": 0}
    counts = pd.Series([len(r.paper_evidence) for r in records], dtype="int64")
    return {
        "samples": int(counts.size),
        "evidence_per_sample": float(counts.mean()),
        "min_evidence": int(counts.min()),
        "max_evidence": int(counts.max()),
    }
