"""
Answer scoring, LLM judging and the ablation matrix.
"""

import hashlib
import json
import logging
import math
import re
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side

from evidencemap.backends import WordVocab
from evidencemap.core_types import ARM_LABELS, FLAG_NAMES, AnalysisFlags, EvidenceMapRecord, QAOutput
from evidencemap.errors import ConfigError, JudgeParseError, ModelError, RemoteError
from evidencemap.pipeline import EvidenceMapStack, ModelConfig, build_stack
from evidencemap.remote import CompletionClient, complete_with_retry
from evidencemap.training import TrainConfig, train

logger = logging.getLogger(__name__)

JUDGE_SYSTEM = (
    "You are an AI assistant tasked with evaluating the quality of the generated answers "
    "in terms of accuracy and fluency."
)
JUDGE_USER = (
    "Please score the generated answer based on accuracy and fluency separately, comparing with the reference answer.\n"
    "The scores should be a float number between 0.0 and 1.0, where 0.0 indicates the generated answer is "
    "completely incorrect or unable to understand, 1.0 means the generated answer is totally precise and fluent.\n"
    'Your output should be a dictionary such as {"accuracy": 0.8, "fluency": 0.9}, '
    "without any additional information.\n"
    "The question, generated answer, and reference answer are give as below:\n"
    "Question: {question}\n"
    "Generated answer: {generated}\n"
    "Reference answer: {reference}\n"
    "Your output:"
)
FORMAT_REMINDER = '\nReply with only the dictionary, for example {"accuracy": 0.8, "fluency": 0.9}.'

METRICS = ("rouge_l", "embed_sim", "llm_acc", "llm_flu")
METRIC_TITLES = {"rouge_l": "ROUGE-L", "embed_sim": "Embed-Sim", "llm_acc": "LLM-ACC", "llm_flu": "LLM-FLU"}
BASELINE_ARM = "EvidenceMap"
MAX_JUDGE_WORKERS = 4


@dataclass
class EvalConfig:
    max_new_tokens: int = 64
    skip_judge: bool = False
    judge_backend: str = "offline"
    judge_model: str = "gpt-4o"
    scorer_backend: str = "hashing"
    concurrency: int = MAX_JUDGE_WORKERS
    debug_layout: bool = False
    backoff_seconds: float = 1.0

    def validate(self) -> "EvalConfig":
        errors = []
        if self.max_new_tokens < 1:
            errors.append(f"max_new_tokens must be positive, got {self.max_new_tokens}")
        if self.concurrency < 1:
            errors.append(f"concurrency must be positive, got {self.concurrency}")
        if errors:
            raise ConfigError("Invalid evaluation configuration:\n" + "\n".join(errors))
        return self


# -------------------- ROUGE-L --------------------
def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, start=1):
            current.append(previous[j - 1] + 1 if x == y else max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS F-measure over lowercase whitespace tokens."""
    cand = candidate.lower().split()
    ref = reference.lower().split()
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


# -------------------- Embedding similarity --------------------
class EmbeddingScorer(ABC):
    @abstractmethod
    def embed(self, text: str) -> np.ndarray:
        ...


class HashingScorer(EmbeddingScorer):
    """Signed feature hashing of lowercase words; offline and deterministic."""

    def __init__(self, dim: int = 512):
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dim, dtype=np.float64)
        for word in text.lower().split():
            digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "little")
            vector[value % self.dim] += 1.0 if (value >> 63) == 0 else -1.0
        return vector


class SentenceTransformerScorer(EmbeddingScorer):
    def __init__(self, model_id: str):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise ModelError("the pretrained scorer needs the 'pretrained' extra (sentence-transformers)") from exc
        self.model_id = model_id
        self.model = SentenceTransformer(model_id)

    def embed(self, text: str) -> np.ndarray:
        return np.asarray(self.model.encode(text, convert_to_numpy=True), dtype=np.float64)


def make_scorer(key: str) -> EmbeddingScorer:
    if key == "hashing":
        return HashingScorer()
    if key.startswith("pretrained:") and key.split(":", 1)[1]:
        return SentenceTransformerScorer(key.split(":", 1)[1])
    raise ConfigError(f"unknown scorer backend {key!r}")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def embed_similarity(candidate: str, reference: str, scorer: EmbeddingScorer) -> float:
    return cosine(scorer.embed(candidate), scorer.embed(reference))


# -------------------- Judge --------------------
@dataclass(frozen=True)
class JudgeVerdict:
    accuracy: float
    fluency: float
    raw_reply: str = ""

    def __post_init__(self) -> None:
        for name in ("accuracy", "fluency"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} {value} outside [0, 1]")


_JUDGE_PLACEHOLDER = re.compile(r"\{(question|generated|reference)\}")


def build_judge_request(question: str, generated: str, reference: str) -> Tuple[str, str]:
    values = {"question": question, "generated": generated, "reference": reference}
    return JUDGE_SYSTEM, _JUDGE_PLACEHOLDER.sub(lambda m: values[m.group(1)], JUDGE_USER)


def _score(value: Any) -> Optional[float]:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return None
    value = float(value)
    return value if 0.0 <= value <= 1.0 else None


def parse_verdict(reply: str) -> Optional[JudgeVerdict]:
    """Verdict from the first JSON object in the reply, or None if it is unusable."""
    decoder = json.JSONDecoder()
    start = reply.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(reply, start)
        except ValueError:
            start = reply.find("{", start + 1)
            continue
        if not isinstance(obj, dict):
            return None
        accuracy, fluency = _score(obj.get("accuracy")), _score(obj.get("fluency"))
        if accuracy is None or fluency is None:
            return None
        return JudgeVerdict(accuracy=accuracy, fluency=fluency, raw_reply=reply)
    return None


def judge(question: str, generated: str, reference: str, client: CompletionClient,
          backoff_seconds: float = 1.0) -> JudgeVerdict:
    """Ask the judge once, then once more with a format reminder; never invent a score."""
    system, user = build_judge_request(question, generated, reference)
    first = complete_with_retry(client, system, user, backoff_seconds=backoff_seconds)
    verdict = parse_verdict(first)
    if verdict is not None:
        return verdict

    logger.warning("Judge reply had no usable verdict; retrying with a format reminder")
    second = complete_with_retry(client, system, user + FORMAT_REMINDER, backoff_seconds=backoff_seconds)
    verdict = parse_verdict(second)
    if verdict is not None:
        return verdict
    raise JudgeParseError("judge produced no valid verdict", raw_replies=(first, second))


# -------------------- Reports --------------------
def _mean(values: pd.Series) -> Optional[float]:
    values = pd.to_numeric(values, errors="coerce").dropna()
    return float(values.mean()) if len(values) else None


@dataclass
class EvalReport:
    rows: List[Dict[str, Any]]
    flags: AnalysisFlags = field(default_factory=AnalysisFlags)
    judged: bool = True
    outputs: List[QAOutput] = field(default_factory=list)
    layouts: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def metrics(self) -> List[str]:
        return list(METRICS) if self.judged else ["rouge_l", "embed_sim"]

    @property
    def means(self) -> Dict[str, Optional[float]]:
        frame = pd.DataFrame(self.rows, columns=["id"] + self.metrics)
        return {metric: _mean(frame[metric]) for metric in self.metrics}

    @property
    def counts(self) -> Dict[str, int]:
        counts = {"records": len(self.rows)}
        if self.judged:
            missing = sum(1 for row in self.rows if row.get("llm_acc") is None)
            counts.update(judged=len(self.rows) - missing, judge_missing=missing)
        return counts

    def to_dict(self) -> dict:
        return {
            "flags": self.flags.to_dict(),
            "counts": self.counts,
            "means": self.means,
            "records": [{k: row.get(k) for k in ["id"] + self.metrics} for row in self.rows],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        flags = AnalysisFlags(**data.get("flags", {}))
        judged = "llm_acc" in data.get("means", {})
        return cls(rows=list(data.get("records", [])), flags=flags, judged=judged)


def evaluate_records(records: Sequence[EvidenceMapRecord], stack: EvidenceMapStack, scorer: EmbeddingScorer,
                     client: Optional[CompletionClient], eval_config: EvalConfig) -> EvalReport:
    """Generate for every record, score against references and judge with bounded parallelism."""
    eval_config.validate()
    outputs: List[QAOutput] = []
    layouts: List[Dict[str, Any]] = []
    rows: List[Dict[str, Any]] = []

    for k, record in enumerate(records, start=1):
        output = stack.answer(record, eval_config.max_new_tokens)
        outputs.append(output)
        rows.append({
            "id": record.id,
            "rouge_l": rouge_l(output.generated_answer, record.reference_answer),
            "embed_sim": embed_similarity(output.generated_answer, record.reference_answer, scorer),
        })
        if eval_config.debug_layout:
            layouts.append({"id": record.id, "layout": list(stack.assemble(record).layout)})
        if k % 25 == 0:
            logger.info("Generated %d/%d answers", k, len(records))

    judged = not eval_config.skip_judge
    if judged:
        if client is None:
            raise ConfigError("a judge client is required unless the judge is skipped")

        def run(pair):
            record, output = pair
            try:
                return judge(record.question, output.generated_answer, record.reference_answer, client,
                             backoff_seconds=eval_config.backoff_seconds)
            except (JudgeParseError, RemoteError) as exc:
                logger.warning("No judge verdict for %s: %s", record.id, exc, extra={"record_id": record.id})
                return None

        workers = max(1, min(eval_config.concurrency, MAX_JUDGE_WORKERS))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            verdicts = list(pool.map(run, zip(records, outputs)))
        for row, verdict in zip(rows, verdicts):
            row["llm_acc"] = verdict.accuracy if verdict else None
            row["llm_flu"] = verdict.fluency if verdict else None

    report = EvalReport(rows=rows, flags=stack.flags, judged=judged, outputs=outputs, layouts=layouts)
    logger.info("Evaluated %d records: %s", len(rows),
                ", ".join(f"{k}={v:.4f}" for k, v in report.means.items() if v is not None))
    return report


# -------------------- Ablation --------------------
def delta_percent(baseline: Optional[float], value: Optional[float]) -> Optional[float]:
    if baseline is None or value is None or baseline == 0:
        return None
    return (value - baseline) / baseline * 100.0


@dataclass
class AblationRow:
    arm: str
    flags: AnalysisFlags
    means: Dict[str, Optional[float]]
    deltas: Dict[str, Optional[float]]
    exact_match: Optional[float] = None


@dataclass
class AblationTable:
    baseline: AblationRow
    arms: List[AblationRow]

    def to_dict(self) -> dict:
        def row_dict(row: AblationRow) -> dict:
            return {"arm": row.arm, "flags": row.flags.to_dict(), "means": row.means,
                    "deltas": row.deltas, "exact_match": row.exact_match}
        return {"baseline": row_dict(self.baseline), "arms": [row_dict(row) for row in self.arms]}

    @classmethod
    def from_dict(cls, data: dict) -> "AblationTable":
        def row_from(d: dict) -> AblationRow:
            return AblationRow(arm=d["arm"], flags=AnalysisFlags(**d.get("flags", {})), means=d.get("means", {}),
                               deltas=d.get("deltas", {}), exact_match=d.get("exact_match"))
        return cls(baseline=row_from(data["baseline"]), arms=[row_from(d) for d in data.get("arms", [])])

    def frame(self) -> pd.DataFrame:
        columns: Dict[str, List[Any]] = {"Arm": []}
        metrics = [m for m in METRICS if m in self.baseline.means]
        for row in [self.baseline] + self.arms:
            columns["Arm"].append(row.arm)
            for metric in metrics:
                columns.setdefault(METRIC_TITLES[metric], []).append(row.means.get(metric))
                columns.setdefault(f"Δ {METRIC_TITLES[metric]} %", []).append(row.deltas.get(metric))
        return pd.DataFrame(columns)


def exact_match_rate(records: Sequence[EvidenceMapRecord], outputs: Sequence[QAOutput]) -> float:
    if not records:
        return 0.0
    hits = sum(1 for r, o in zip(records, outputs) if o.generated_answer.strip() == r.reference_answer.strip())
    return hits / len(records)


def ablation_arms(names: Optional[Sequence[str]] = None) -> List[str]:
    """Short arm names in table order; unknown names raise UnknownFlagError."""
    if not names:
        return list(FLAG_NAMES)
    base = AnalysisFlags()
    for name in names:
        base.without(name)
    wanted = {name.strip().lower() for name in names}
    return [short for short, full in FLAG_NAMES.items() if short in wanted or full in wanted]


def run_ablation(train_records: Sequence[EvidenceMapRecord], eval_records: Sequence[EvidenceMapRecord],
                 model_config: ModelConfig, train_config: TrainConfig, eval_config: EvalConfig,
                 arms: Optional[Sequence[str]] = None, scorer: Optional[EmbeddingScorer] = None,
                 client: Optional[CompletionClient] = None, vocab: Optional[WordVocab] = None) -> AblationTable:
    """Retrain and evaluate the all-on stack and one stack per removed component."""
    scorer = scorer or HashingScorer()
    base_flags = AnalysisFlags()
    plan = [(BASELINE_ARM, "all", base_flags)] + [(ARM_LABELS[a], a, base_flags.without(a)) for a in ablation_arms(arms)]

    results = []
    for label, slug, flags in plan:
        logger.info("Ablation arm %s", label, extra={"arm": slug})
        stack = build_stack(model_config, flags, vocab, max_new_tokens=eval_config.max_new_tokens)
        arm_train = replace(train_config, flags=flags, checkpoint_dir=Path(train_config.checkpoint_dir) / slug)
        train(train_records, stack, arm_train)
        report = evaluate_records(eval_records, stack, scorer, client, eval_config)
        results.append((label, flags, report.means, exact_match_rate(eval_records, report.outputs)))

    _, flags0, base_means, base_em = results[0]
    baseline = AblationRow(BASELINE_ARM, flags0, base_means, {m: None for m in base_means}, base_em)
    rows = [
        AblationRow(label, flags, means, {m: delta_percent(base_means.get(m), v) for m, v in means.items()}, em)
        for label, flags, means, em in results[1:]
    ]
    return AblationTable(baseline=baseline, arms=rows)


# -------------------- Rendering --------------------
def _fmt(value: Any, pct: bool = False) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:+.1f}%" if pct else f"{value:.4f}"


def render_table(report: Union[EvalReport, AblationTable]) -> str:
    """Plain-text table: one row per arm with metric and Δ columns."""
    if isinstance(report, EvalReport):
        frame = pd.DataFrame([{METRIC_TITLES[k]: _fmt(v) for k, v in report.means.items()}])
        counts = ", ".join(f"{k}={v}" for k, v in report.counts.items())
        return frame.to_string(index=False) + f"\n({counts})\n"

    frame = report.frame()
    for column in frame.columns[1:]:
        frame[column] = [_fmt(v, pct=column.startswith("Δ")) for v in frame[column]]
    return frame.to_string(index=False) + "\n"


class AblationWorkbookStyler:
    """Header, border and delta styling for the ablation workbook."""

    HEADER_FILL = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
    BASELINE_FILL = PatternFill(start_color="C6EFCE", end_color="C6EFCE", fill_type="solid")
    THIN = Side(style="thin")

    @classmethod
    def apply_header_style(cls, ws) -> None:
        for cell in ws[1]:
            cell.font = Font(bold=True, color="FFFFFF")
            cell.fill = cls.HEADER_FILL
            cell.alignment = Alignment(horizontal="center", vertical="center")

    @classmethod
    def apply_borders(cls, ws) -> None:
        border = Border(left=cls.THIN, right=cls.THIN, top=cls.THIN, bottom=cls.THIN)
        for row in ws.iter_rows(min_row=1, max_row=ws.max_row, max_col=ws.max_column):
            for cell in row:
                cell.border = border

    @staticmethod
    def auto_col_widths(ws, max_width: int = 40) -> None:
        for column in ws.columns:
            width = max(len(str(cell.value)) if cell.value is not None else 0 for cell in column)
            ws.column_dimensions[column[0].column_letter].width = min(max_width, width + 2)


def write_ablation_workbook(table: AblationTable, path: Path) -> Path:
    frame = table.frame()
    wb = Workbook()
    ws = wb.active
    ws.title = "Ablation"
    ws.append(list(frame.columns))
    for values in frame.itertuples(index=False):
        ws.append([None if (isinstance(v, float) and math.isnan(v)) else v for v in values])

    for col_idx, title in enumerate(frame.columns, start=1):
        for (cell,) in ws.iter_rows(min_row=2, min_col=col_idx, max_col=col_idx):
            if title.startswith("Δ"):
                cell.number_format = '+0.0"%";-0.0"%"'
                if isinstance(cell.value, (int, float)) and cell.value < 0:
                    cell.font = Font(color="9C0006")
            elif col_idx > 1:
                cell.number_format = "0.0000"
    for cell in ws[2]:
        cell.fill = AblationWorkbookStyler.BASELINE_FILL

    AblationWorkbookStyler.apply_header_style(ws)
    AblationWorkbookStyler.apply_borders(ws)
    AblationWorkbookStyler.auto_col_widths(ws)
    ws.freeze_panes = "A2"

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wb.save(path)
    return path
