"""
Command-line entry point.

    evidencemap acquire  --data train.jsonl
    evidencemap train    --data train.jsonl --epochs 10
    evidencemap evaluate --eval-data test.jsonl --skip-judge
    evidencemap ablate   --data train.jsonl --eval-data test.jsonl --flags cor,ea
    evidencemap report   --input runs/latest/ablation.json
    evidencemap stats    --data bioasq.json
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from evidencemap.analysis import PromptTemplates
from evidencemap.backends import WordVocab, parse_backend_key
from evidencemap.config import RunConfig, load_run_config
from evidencemap.core_types import AnalysisFlags, EvidenceMapRecord
from evidencemap.errors import EXIT_OK, EXIT_USAGE, CheckpointError, EvidenceMapError, PreconditionError, UsageError
from evidencemap.evaluation import (
    AblationTable,
    EvalReport,
    ablation_arms,
    evaluate_records,
    make_scorer,
    render_table,
    run_ablation,
    write_ablation_workbook,
)
from evidencemap.generation import render_text
from evidencemap.ingestion import EvidenceCache, IngestConfig, acquire_all, dataset_statistics, load_dataset
from evidencemap.log import VALID_LEVELS, configure_logging
from evidencemap.pipeline import ModelConfig, build_stack
from evidencemap.remote import make_client
from evidencemap.training import load_checkpoint, read_manifest, read_vocab, train

logger = logging.getLogger("evidencemap.cli")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so main() owns exit codes."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", type=str, default=None, help="Training or input dataset (JSONL / BioASQ / PubMedQA)")
    common.add_argument("--eval-data", type=str, default=None, help="Evaluation dataset (defaults to --data)")
    common.add_argument("--config", type=str, default=None, help="TOML config file")
    common.add_argument("--seed", type=int, default=None, help="Seed for every source of randomness")
    common.add_argument("--epochs", type=int, default=None)
    common.add_argument("--lr", type=float, default=None, help="Learning rate")
    common.add_argument("--batch", type=int, default=None, help="Batch size")
    common.add_argument("--max-papers", type=int, default=None, help="Paper evidence cap per question")
    common.add_argument("--no-llm-evidence", action="store_true", help="Drop LLM key-point evidence")
    common.add_argument("--flags", type=str, default=None,
                        help="Comma list from eval,cor,sum,te,ea,proj: enabled parts (train) or arms to ablate (ablate)")
    common.add_argument("--backend-encoder", type=str, default=None, help="mock | pretrained:<model-id>")
    common.add_argument("--backend-decoder", type=str, default=None,
                        help="mock | mock:transformer | pretrained:<model-id>")
    common.add_argument("--remote-backend", type=str, default=None,
                        help="Acquisition client: offline | http | fixture:<path> | record:<path>")
    common.add_argument("--judge-backend", type=str, default=None, help="Judge client: offline | http | fixture:<path>")
    common.add_argument("--scorer", type=str, default=None, help="hashing | pretrained:<model-id>")
    common.add_argument("--max-new-tokens", type=int, default=None)
    common.add_argument("--skip-judge", action="store_true", help="Skip LLM-ACC / LLM-FLU")
    common.add_argument("--debug-layout", action="store_true", help="Dump prompt role tags per record")
    common.add_argument("--out", type=str, default=None, help="Output directory")
    common.add_argument("--checkpoint", type=str, default=None, help="Checkpoint archive to evaluate")
    common.add_argument("--templates", type=str, default=None, help="TOML file overriding the analysis templates")
    common.add_argument("--log-level", type=str.upper, default=None, choices=VALID_LEVELS)
    common.add_argument("--json-logs", action="store_true", help="Use JSON logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = _Parser(
        prog="evidencemap",
        description="Evidence-map analysis with a frozen generator",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Environment variables:
  EVIDENCEMAP_LOG_LEVEL        Log level (default: INFO)
  EVIDENCEMAP_SEED             Seed (default: 0)
  EVIDENCEMAP_EPOCHS           Training epochs (default: 10)
  EVIDENCEMAP_LR               Learning rate (default: 5e-4)
  EVIDENCEMAP_BATCH            Batch size (default: 4)
  EVIDENCEMAP_MAX_PAPERS       Paper evidence cap (default: 5)
  EVIDENCEMAP_CACHE_DIR        LLM evidence cache directory
  EVIDENCEMAP_REMOTE_MODEL     Remote model for key-point acquisition
  EVIDENCEMAP_API_BASE         OpenAI-compatible API base URL
  EVIDENCEMAP_API_KEY          API key for the remote model
  EVIDENCEMAP_TIMEOUT_SECONDS  Remote request timeout (default: 60)

Exit codes: 0 ok, 1 usage, 2 data, 3 model/checkpoint, 4 remote.
        """,
    )
    subparsers = parser.add_subparsers(dest="command", parser_class=_Parser)
    subparsers.required = True
    subparsers.add_parser("acquire", parents=[common], help="Populate the LLM evidence cache")
    subparsers.add_parser("train", parents=[common], help="Train encoder and MLPs against the frozen decoder")
    subparsers.add_parser("evaluate", parents=[common], help="Generate and score answers from a checkpoint")
    subparsers.add_parser("ablate", parents=[common], help="Retrain and score one arm per removed component")
    report = subparsers.add_parser("report", parents=[common], help="Re-render a saved eval or ablation report")
    report.add_argument("--input", type=str, required=True, help="eval_report.json or ablation.json")
    report.add_argument("--xlsx", type=str, default=None, help="Workbook path for ablation reports")
    subparsers.add_parser("stats", parents=[common], help="Dataset sample and evidence counts")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "log_level": args.log_level,
        "train.seed": args.seed,
        "train.epochs": args.epochs,
        "train.learning_rate": args.lr,
        "train.batch_size": args.batch,
        "train.flags": args.flags if args.command != "ablate" else None,
        "ingest.max_paper_evidence": args.max_papers,
        "ingest.include_llm_evidence": False if args.no_llm_evidence else None,
        "ingest.remote_backend": args.remote_backend,
        "model.encoder": args.backend_encoder,
        "model.decoder": args.backend_decoder,
        "eval.judge_backend": args.judge_backend,
        "eval.scorer_backend": args.scorer,
        "eval.max_new_tokens": args.max_new_tokens,
        "eval.skip_judge": True if args.skip_judge else None,
        "eval.debug_layout": True if args.debug_layout else None,
        "paths.data": args.data,
        "paths.eval_data": args.eval_data,
        "paths.out": args.out,
        "paths.checkpoint": args.checkpoint,
        "paths.templates": args.templates,
    }


# -------------------- Helpers --------------------
def _write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    logger.info("Wrote %s", path)
    return path


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    logger.info("Wrote %s", path)
    return path


def _require(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required for this command")
    return Path(path)


def _cache(config: RunConfig) -> Optional[EvidenceCache]:
    if not config.ingest.include_llm_evidence:
        return None
    return EvidenceCache(config.ingest.cache_dir, config.ingest.remote_model_name)


def _load(config: RunConfig, path: Path, ingest: Optional[IngestConfig] = None) -> List[EvidenceMapRecord]:
    return load_dataset(path, ingest or config.ingest, cache=_cache(config))


def _templates(config: RunConfig) -> Optional[PromptTemplates]:
    return PromptTemplates.from_file(config.paths.templates) if config.paths.templates else None


def _vocab(config: RunConfig, records: Sequence[EvidenceMapRecord]) -> Optional[WordVocab]:
    if parse_backend_key(config.model.decoder)[0] != "mock":
        return None
    texts = [render_text(r) + "\n" + r.reference_answer for r in records]
    return WordVocab.build(texts, config.model.vocab_size)


def _latest_checkpoint(config: RunConfig) -> Path:
    if config.paths.checkpoint:
        return Path(config.paths.checkpoint)
    found = sorted(Path(config.train.checkpoint_dir).glob("epoch-*.zip"))
    if not found:
        raise CheckpointError(f"no checkpoint found in {config.train.checkpoint_dir}; pass --checkpoint")
    return found[-1]


# -------------------- Commands --------------------
def cmd_acquire(config: RunConfig) -> Dict[str, int]:
    records = load_dataset(_require(config.paths.data, "--data"), config.ingest)
    if not config.ingest.include_llm_evidence:
        _, summary = acquire_all(records, None, config.ingest)  # type: ignore[arg-type]
    else:
        client = make_client(config.ingest.remote_backend, config.ingest.remote_model_name,
                             api_base=config.api_base, timeout_seconds=config.timeout_seconds)
        _, summary = acquire_all(records, client, config.ingest, _cache(config))
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_train(config: RunConfig) -> Path:
    records = _load(config, _require(config.paths.data, "--data"))
    missing = sum(1 for r in records if config.ingest.include_llm_evidence and r.llm_evidence is None)
    if missing:
        logger.warning("%d/%d records have no cached LLM evidence; run 'acquire' first", missing, len(records))

    stack = build_stack(config.model, config.train.flags, _vocab(config, records), _templates(config),
                        max_new_tokens=config.eval.max_new_tokens)
    report = train(records, stack, config.train)
    out = Path(config.paths.out)
    _write_json(out / "train_timings.json", report.timings_dict())
    path = _write_json(out / "train_report.json", report.to_dict())
    print(path)
    return path


def _restore_stack(config: RunConfig, checkpoint: Path):
    manifest = read_manifest(checkpoint)
    try:
        model_config = ModelConfig.from_dict(manifest["model_config"])
        flags = AnalysisFlags(**manifest["flags"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{checkpoint} manifest lacks model settings: {exc}") from exc
    stack = build_stack(model_config, flags, read_vocab(checkpoint), _templates(config),
                        max_new_tokens=config.eval.max_new_tokens)
    load_checkpoint(checkpoint, stack)
    logger.info("Restored %s (flags: %s)", checkpoint, ",".join(flags.enabled_names()))
    return stack


def cmd_evaluate(config: RunConfig) -> Path:
    checkpoint = _latest_checkpoint(config)
    stack = _restore_stack(config, checkpoint)
    data = config.paths.eval_data or _require(config.paths.data, "--eval-data or --data")
    # evaluation records get the same evidence cap the model was trained with
    ingest = replace(config.ingest, max_paper_evidence=stack.config.max_slots - 1)
    records = _load(config, Path(data), ingest)

    client = None
    if not config.eval.skip_judge:
        client = make_client(config.eval.judge_backend, config.eval.judge_model,
                             api_base=config.api_base, timeout_seconds=config.timeout_seconds)
    report = evaluate_records(records, stack, make_scorer(config.eval.scorer_backend), client, config.eval)

    out = Path(config.paths.out)
    _write_text(out / "generations.jsonl", "".join(json.dumps(o.to_dict(), ensure_ascii=False) + "\n"
                                                   for o in report.outputs))
    if config.eval.debug_layout:
        _write_text(out / "layout.jsonl", "".join(json.dumps(row) + "\n" for row in report.layouts))
    _write_text(out / "eval_report.txt", render_table(report))
    path = _write_json(out / "eval_report.json", report.to_dict())
    print(render_table(report), end="")
    return path


def cmd_ablate(config: RunConfig, arms: Optional[str]) -> Path:
    names = [a for a in (arms or "").split(",") if a.strip()]
    selected = ablation_arms(names)
    train_records = _load(config, _require(config.paths.data, "--data"))
    eval_records = _load(config, Path(config.paths.eval_data)) if config.paths.eval_data else train_records

    client = None
    if not config.eval.skip_judge:
        client = make_client(config.eval.judge_backend, config.eval.judge_model,
                             api_base=config.api_base, timeout_seconds=config.timeout_seconds)
    table = run_ablation(train_records, eval_records, config.model, config.train, config.eval,
                         arms=selected, scorer=make_scorer(config.eval.scorer_backend), client=client,
                         vocab=_vocab(config, train_records))

    out = Path(config.paths.out)
    text = render_table(table)
    _write_text(out / "ablation.txt", text)
    write_ablation_workbook(table, out / "ablation.xlsx")
    logger.info("Wrote %s", out / "ablation.xlsx")
    path = _write_json(out / "ablation.json", table.to_dict())
    print(text, end="")
    return path


def cmd_report(config: RunConfig, input_path: str, xlsx: Optional[str]) -> str:
    path = Path(input_path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise PreconditionError(f"cannot read report {path}: {exc}") from exc

    if "arms" in data:
        table = AblationTable.from_dict(data)
        text = render_table(table)
        workbook = Path(xlsx) if xlsx else path.with_suffix(".xlsx")
        write_ablation_workbook(table, workbook)
        logger.info("Wrote %s", workbook)
    else:
        text = render_table(EvalReport.from_dict(data))
    print(text, end="")
    return text


def cmd_stats(config: RunConfig) -> Dict[str, float]:
    # counts before the evidence cap
    ingest = replace(config.ingest, max_paper_evidence=sys.maxsize, include_llm_evidence=False)
    records = load_dataset(_require(config.paths.data, "--data"), ingest)
    stats = dataset_statistics(records)
    print(json.dumps(stats, sort_keys=True))
    return stats


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"evidencemap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    configure_logging(args.log_level or "INFO", args.json_logs)

    try:
        config = load_run_config(config_path=Path(args.config) if args.config else None, overrides=_overrides(args))
        configure_logging(config.log_level, args.json_logs)
        logger.debug("Running %s with seed %d", args.command, config.train.seed)

        if args.command == "acquire":
            cmd_acquire(config)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "evaluate":
            cmd_evaluate(config)
        elif args.command == "ablate":
            cmd_ablate(config, args.flags)
        elif args.command == "report":
            cmd_report(config, args.input, args.xlsx)
        elif args.command == "stats":
            cmd_stats(config)
    except EvidenceMapError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
