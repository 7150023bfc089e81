"""
Training loop and checkpoint archives.

Only the encoder, the summarizer and the projector are optimized; the decoder
stays frozen and is never written to a checkpoint. Archives are deterministic
zip files so two runs with the same seed produce identical bytes.
"""

import io
import json
import logging
import math
import os
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch.nn.utils import clip_grad_norm_

from evidencemap.backends import WordVocab
from evidencemap.core_types import AnalysisFlags, EvidenceMapRecord, validate_record
from evidencemap.errors import (
    CheckpointError,
    ConfigError,
    CorruptArchive,
    ModelError,
    NonFiniteLoss,
    PreconditionError,
    ShapeMismatch,
)
from evidencemap.pipeline import EvidenceMapStack

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
VOCAB_NAME = "decoder_vocab.json"
ARCHIVE_FORMAT = 1
GRAD_CLIP_NORM = 1.0
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    max_paper_evidence: int = 5
    flags: AnalysisFlags = field(default_factory=AnalysisFlags)
    checkpoint_dir: Path = Path("checkpoints")
    log_every: int = 10

    def validate(self) -> "TrainConfig":
        errors = []
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            errors.append(f"learning_rate must be a non-negative number, got {self.learning_rate}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            errors.append(f"epochs must be positive, got {self.epochs}")
        if self.max_paper_evidence < 1:
            errors.append(f"max_paper_evidence must be positive, got {self.max_paper_evidence}")
        if errors:
            raise ConfigError("Invalid training configuration:\n" + "\n".join(errors))
        return self


@dataclass
class TrainReport:
    epoch_losses: List[float] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)
    final_checkpoint: str = ""
    steps: int = 0

    def to_dict(self) -> dict:
        """Deterministic fields only; timings go to timings_dict."""
        return {"epoch_losses": self.epoch_losses, "final_checkpoint": self.final_checkpoint, "steps": self.steps}

    def timings_dict(self) -> dict:
        return {"epoch_seconds": self.epoch_seconds, "total_seconds": sum(self.epoch_seconds)}


def _ensure_writable(directory: Path) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create checkpoint directory {directory}: {exc}") from exc
    if not directory.is_dir() or not os.access(directory, os.W_OK):
        raise CheckpointError(f"checkpoint directory {directory} is not writable")


def train(records: Sequence[EvidenceMapRecord], stack: EvidenceMapStack, config: TrainConfig) -> TrainReport:
    """Optimize the trainable modules on the teacher-forced answer loss."""
    config.validate()
    if not records:
        raise PreconditionError("no training records")
    for record in records:
        validate_record(record, training=True)
    if any(p.requires_grad for p in stack.decoder.parameters()):
        raise PreconditionError("decoder must be frozen before training")

    checkpoint_dir = Path(config.checkpoint_dir)
    _ensure_writable(checkpoint_dir)

    decoder_checksum = stack.decoder.checksum()
    params = [p for p in stack.trainable_modules().parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    generator = torch.Generator().manual_seed(config.seed)

    targets = [stack.answer_ids(record.reference_answer) for record in records]
    n = len(records)
    n_batches = math.ceil(n / config.batch_size)
    report = TrainReport()
    logger.info("Training on %d records: %d epochs x %d batches (lr=%g, batch=%d)",
                n, config.epochs, n_batches, config.learning_rate, config.batch_size)

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = torch.randperm(n, generator=generator).tolist()
        per_record = [0.0] * n
        stack.trainable_modules().train()

        for b in range(n_batches):
            batch = order[b * config.batch_size:(b + 1) * config.batch_size]
            optimizer.zero_grad(set_to_none=True)
            terms = []
            for i in batch:
                loss = stack.loss(records[i], targets[i])
                value = float(loss.detach())
                if not math.isfinite(value):
                    logger.error("Non-finite loss %s", value, extra={"record_id": records[i].id, "epoch": epoch})
                    raise NonFiniteLoss(records[i].id, value)
                per_record[i] = value / len(targets[i])
                terms.append(loss / len(targets[i]))

            batch_loss = torch.stack(terms).mean()
            # nothing to optimize when every analysis part is switched off
            if batch_loss.requires_grad:
                batch_loss.backward()
                clip_grad_norm_(params, GRAD_CLIP_NORM)
                optimizer.step()
            report.steps += 1
            if (b + 1) % config.log_every == 0:
                logger.debug("Trained %d/%d batches", b + 1, n_batches,
                             extra={"epoch": epoch, "step": report.steps})

        epoch_loss = math.fsum(per_record) / n
        if not math.isfinite(epoch_loss):
            raise NonFiniteLoss("<epoch mean>", epoch_loss)
        elapsed = time.perf_counter() - started
        report.epoch_losses.append(epoch_loss)
        report.epoch_seconds.append(elapsed)

        path = save_checkpoint(stack, checkpoint_dir / f"epoch-{epoch:03d}.zip")
        report.final_checkpoint = path.name
        logger.info("Epoch %d/%d: mean loss %.6f (%.1fs)", epoch, config.epochs, epoch_loss, elapsed,
                    extra={"epoch": epoch, "step": report.steps})

    if stack.decoder.checksum() != decoder_checksum:
        raise ModelError("decoder parameters changed during training")
    return report


# -------------------- Checkpoints --------------------
def _npy_bytes(tensor: torch.Tensor) -> bytes:
    buffer = io.BytesIO()
    np.lib.format.write_array(buffer, tensor.detach().cpu().contiguous().numpy(), allow_pickle=False)
    return buffer.getvalue()


def _zip_entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(stack: EvidenceMapStack, path: Path) -> Path:
    """Write encoder/summarizer/projector weights plus manifest; decoder weights are never included."""
    path = Path(path)
    state = stack.trainable_modules().state_dict()
    manifest: Dict[str, object] = {
        "format": ARCHIVE_FORMAT,
        "config_hash": stack.config_hash(),
        "model_config": stack.config.to_dict(),
        "flags": stack.flags.to_dict(),
        "tensors": {
            name: {"shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""), "file": f"tensors/{name}.npy"}
            for name, t in state.items()
        },
    }
    entries = {MANIFEST_NAME: json.dumps(manifest, sort_keys=True, indent=2).encode("utf-8")}
    if stack.vocab is not None:
        entries[VOCAB_NAME] = json.dumps(stack.vocab.to_dict(), sort_keys=True).encode("utf-8")
    for name, tensor in state.items():
        entries[f"tensors/{name}.npy"] = _npy_bytes(tensor)

    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(tmp, "w") as archive:
            for name in sorted(entries):
                archive.writestr(_zip_entry(name), entries[name])
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.debug("Wrote checkpoint %s (%d tensors)", path, len(state))
    return path


def _open_archive(path: Path) -> zipfile.ZipFile:
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        return zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CorruptArchive(f"{path} is not a readable checkpoint archive: {exc}") from exc


def read_manifest(path: Path) -> dict:
    with _open_archive(path) as archive:
        try:
            manifest = json.loads(archive.read(MANIFEST_NAME).decode("utf-8"))
        except (KeyError, ValueError, zipfile.BadZipFile) as exc:
            raise CorruptArchive(f"{path} has no valid {MANIFEST_NAME}: {exc}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), dict):
        raise CorruptArchive(f"{path} manifest lacks a tensor table")
    return manifest


def read_vocab(path: Path) -> Optional[WordVocab]:
    with _open_archive(path) as archive:
        if VOCAB_NAME not in archive.namelist():
            return None
        try:
            return WordVocab.from_dict(json.loads(archive.read(VOCAB_NAME).decode("utf-8")))
        except (ValueError, zipfile.BadZipFile) as exc:
            raise CorruptArchive(f"{path} has an unreadable {VOCAB_NAME}: {exc}") from exc


def load_checkpoint(path: Path, stack: EvidenceMapStack) -> dict:
    """Load weights into the stack's trainable modules; returns the manifest."""
    manifest = read_manifest(path)
    expected = stack.trainable_modules().state_dict()
    stored = manifest["tensors"]

    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise ShapeMismatch(f"parameter sets differ (missing: {missing[:3]}, unexpected: {extra[:3]})")
    for name, tensor in expected.items():
        if list(stored[name].get("shape", [])) != list(tensor.shape):
            raise ShapeMismatch(f"{name}: archive shape {stored[name].get('shape')} != model shape {list(tensor.shape)}")

    loaded = {}
    with _open_archive(path) as archive:
        for name, tensor in expected.items():
            try:
                array = np.load(io.BytesIO(archive.read(stored[name]["file"])), allow_pickle=False)
            except (KeyError, ValueError, OSError, zipfile.BadZipFile) as exc:
                raise CorruptArchive(f"{path}: tensor {name} unreadable: {exc}") from exc
            if list(array.shape) != list(tensor.shape):
                raise CorruptArchive(f"{path}: tensor {name} data does not match its manifest shape")
            loaded[name] = torch.from_numpy(array).to(tensor.dtype)

    stack.trainable_modules().load_state_dict(loaded)
    if manifest.get("config_hash") != stack.config_hash():
        logger.warning("Checkpoint %s was written for a different configuration", path)
    return manifest
