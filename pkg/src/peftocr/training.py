"""Training, evaluation and the encoder/decoder strategy ablation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .config import TrainConfig
from .data import DatasetManifest, Record, Vocabulary, detokenize, image_width, tokenize
from .errors import CompatibilityError, ManifestError, SetupError, TrainingDivergenceError
from .metrics import MetricsReport, corpus_report, format_aligned, format_delimited
from .model import ModelConfig, OcrModel, count_parameters, generate, images_to_input, inject_adapters, patchify
from .optim import AdamWState, adamw_step

log = logging.getLogger(__name__)

#: Encoder/decoder strategy pairs, in table order.
ABLATION_GRID: tuple[tuple[str, str], ...] = (
    ("frozen", "lora"),
    ("frozen", "dora"),
    ("frozen", "full_ft"),
    ("lora", "frozen"),
    ("dora", "frozen"),
    ("full_ft", "frozen"),
    ("lora", "lora"),
    ("dora", "dora"),
    ("lora", "dora"),
    ("dora", "lora"),
    ("full_ft", "full_ft"),
)

_LABELS = {"frozen": "-", "lora": "LoRA", "dora": "DoRA", "full_ft": "Fine-Tune"}


def strategy_label(encoder: str, decoder: str) -> str:
    if (encoder, decoder) == ("dora", "lora"):
        return "DLoRA"
    return f"{_LABELS[encoder]}/{_LABELS[decoder]}"


def model_config_for(manifest: DatasetManifest, **overrides) -> ModelConfig:
    """Model dimensions that fit a corpus (image width, decode length, vocabulary)."""
    base = {
        "image_width": image_width(manifest.max_chars),
        "max_decode_len": manifest.max_chars + 1,
        "vocab_size": len(manifest.vocab),
    }
    return ModelConfig(**(base | overrides))


def check_compatible(model: OcrModel, vocab: Vocabulary, manifest: DatasetManifest) -> None:
    if vocab != manifest.vocab:
        raise CompatibilityError("checkpoint vocabulary differs from the corpus vocabulary")
    cfg = model.config
    if cfg.vocab_size != len(manifest.vocab):
        raise CompatibilityError(
            f"model has {cfg.vocab_size} output tokens, corpus vocabulary has {len(manifest.vocab)}"
        )
    if cfg.image_width != image_width(manifest.max_chars) or cfg.max_decode_len < manifest.max_chars + 1:
        raise CompatibilityError(
            f"model expects {cfg.image_width}px lines / {cfg.max_decode_len} decode steps; "
            f"corpus has max_len={manifest.max_chars}"
        )


@dataclass
class Arrays:
    patches: np.ndarray
    tokens_in: np.ndarray
    tokens_out: np.ndarray
    records: list[Record]


def encode_records(manifest: DatasetManifest, records: Sequence[Record], cfg: ModelConfig) -> Arrays:
    vocab = manifest.vocab
    t = cfg.max_decode_len
    n = len(records)
    images = np.stack([manifest.image(r) for r in records]) if n else np.zeros((0, cfg.image_height, cfg.image_width))
    patches = patchify(images_to_input(images), cfg.patch_size) if n else np.zeros((0, cfg.patch_count, cfg.patch_dim))
    tin = np.zeros((n, t), dtype=np.int64)
    tout = np.zeros((n, t), dtype=np.int64)
    for i, r in enumerate(records):
        ids = tokenize(r.transcript, vocab).ids
        if len(ids) - 1 > t:
            raise ManifestError(f"transcript of {r.record_id} is longer than the decoder allows")
        tin[i, : len(ids) - 1] = ids[:-1]
        tout[i, : len(ids) - 1] = ids[1:]
    return Arrays(patches, tin, tout, list(records))


# ------------------------------------------------------------------- train


@dataclass
class TrainResult:
    model: OcrModel
    log_lines: list[str]
    losses: list[float]
    val_cer: list[float]
    best_epoch: int
    best_state: dict[str, np.ndarray] = field(repr=False)
    base_checksum_before: str = ""
    base_checksum_after: str = ""

    @property
    def log_text(self) -> str:
        return "".join(line + "\n" for line in self.log_lines)


def _shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train(
    model: OcrModel,
    manifest: DatasetManifest,
    config: TrainConfig,
    *,
    val_split: str | None = "val",
    max_steps: int | None = None,
    restore_best: bool = True,
    on_epoch: Callable[[int, OcrModel], None] | None = None,
) -> TrainResult:
    """Mini-batch NLL training of every trainable tensor with AdamW.

    The train split is reshuffled each epoch from ``(seed, epoch)``.  After
    each epoch the mixed CER on ``val_split`` is logged and the best state is
    kept; with ``restore_best`` the model ends in that state.  A non-finite
    loss or gradient raises :class:`TrainingDivergenceError` carrying the
    state at the end of the last completed epoch.
    """
    data = encode_records(manifest, manifest.split("train"), model.config)
    if not data.records:
        raise ManifestError("the train split is empty")
    val_records = manifest.split(val_split) if val_split else []
    opt_cfg = config.optimizer()
    state = AdamWState()
    lines = [f"# strategy={config.encoder}/{config.decoder} lr={opt_cfg.lr!r} epochs={config.epochs} "
             f"batch={config.batch} seed={config.seed}"]
    losses: list[float] = []
    val_curve: list[float] = []
    checksum_before = model.base_checksum()
    best_state = last_good = model.snapshot()
    best_cer, best_epoch = float("inf"), 0
    step = 0
    n = len(data.records)

    for epoch in range(1, config.epochs + 1):
        order = _shuffle_rng(config.seed, epoch).permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = model.loss_and_grads(data.patches[idx], data.tokens_in[idx], data.tokens_out[idx])
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite loss at step {step + 1}", last_good=last_good)
            try:
                adamw_step(model.trainable_arrays(), grads, state, opt_cfg)
            except TrainingDivergenceError as exc:
                exc.last_good = last_good
                raise
            step += 1
            losses.append(loss)
            epoch_losses.append(loss)
            lines.append(f"step\t{step}\t{loss!r}")
            if max_steps is not None and step >= max_steps:
                break
        mean = float(np.mean(epoch_losses))
        last_good = model.snapshot()
        if val_records:
            cer = evaluate(model, manifest, val_split, check=False).mixed.cer
            val_curve.append(cer)
            if cer < best_cer:
                best_cer, best_epoch, best_state = cer, epoch, last_good
            lines.append(f"epoch\t{epoch}\t{mean!r}\tval_cer\t{cer!r}")
        else:
            best_epoch, best_state = epoch, last_good
            lines.append(f"epoch\t{epoch}\t{mean!r}")
        log.info("epoch %d loss %.4f%s", epoch, mean, f" val CER {val_curve[-1]:.4f}" if val_records else "")
        if on_epoch is not None:
            on_epoch(epoch, model)
        if max_steps is not None and step >= max_steps:
            break

    if restore_best and val_records:
        model.restore(best_state)
    return TrainResult(model, lines, losses, val_curve, best_epoch, best_state, checksum_before,
                       model.base_checksum())


def overfit_batch(model: OcrModel, data: Arrays, config: TrainConfig, *, max_steps: int = 500,
                  target: float = 0.1) -> list[float]:
    """Repeat AdamW steps on one fixed batch until the loss drops below ``target``.

    Returns the loss before every step (the last entry is the first one under
    ``target`` when it was reached).
    """
    opt_cfg = config.optimizer()
    state = AdamWState()
    losses: list[float] = []
    for _ in range(max_steps):
        loss, grads = model.loss_and_grads(data.patches, data.tokens_in, data.tokens_out)
        losses.append(loss)
        if loss < target:
            break
        adamw_step(model.trainable_arrays(), grads, state, opt_cfg)
    return losses


def pretrain(manifest: DatasetManifest, config: TrainConfig, model_config: ModelConfig | None = None,
             **kwargs) -> TrainResult:
    """Train a fresh model end to end (every tensor trainable), e.g. on a printed-only corpus."""
    cfg = model_config or model_config_for(manifest, **config.model_overrides)
    model = OcrModel.initialize(cfg, seed=config.seed)
    full = config.with_strategy("full_ft", "full_ft")
    return train(model, manifest, full, **kwargs)


def prepare_finetune(base: OcrModel, config: TrainConfig) -> OcrModel:
    model = base.copy()
    inject_adapters(model, config.encoder, config.decoder, rank=config.rank, scale=config.scale,
                    seed=config.seed, magnitude_trainable=config.magnitude_trainable,
                    adapt_vocab_projection=config.adapt_vocab_projection)
    return model


# ---------------------------------------------------------------- evaluate


def predict(model: OcrModel, manifest: DatasetManifest, records: Sequence[Record], batch: int = 64) -> list[str]:
    weights = model.effective_weights()
    out: list[str] = []
    for start in range(0, len(records), batch):
        chunk = records[start : start + batch]
        images = images_to_input(np.stack([manifest.image(r) for r in chunk]))
        for seq in generate(model, images, weights=weights):
            out.append(detokenize(seq, manifest.vocab))
    return out


def evaluate(model: OcrModel, manifest: DatasetManifest, split: str = "test", *, vocab: Vocabulary | None = None,
             batch: int = 64, check: bool = True) -> MetricsReport:
    """Greedy-decode every record of ``split`` and report per-style and mixed metrics.

    Records are processed in record-id order so the result does not depend on
    manifest order.
    """
    if check:
        check_compatible(model, vocab if vocab is not None else manifest.vocab, manifest)
    records = sorted(manifest.split(split), key=lambda r: r.record_id)
    if not records:
        raise ManifestError(f"split {split!r} is empty")
    preds = predict(model, manifest, records, batch)
    return corpus_report((r.style, r.transcript, p) for r, p in zip(records, preds))


# ------------------------------------------------------------------ ablation


@dataclass(frozen=True)
class AblationRow:
    encoder: str
    decoder: str
    label: str
    cer: float
    f1: float
    trainable: int
    total: int
    ratio_percent: float
    steps: int
    lr: float

    def as_dict(self) -> dict:
        return {
            "Encoder": _LABELS[self.encoder],
            "Decoder": _LABELS[self.decoder],
            "Label": self.label,
            "AvgCER": 100.0 * self.cer,
            "AvgF1": 100.0 * self.f1,
            "Trainable": self.trainable,
            "Total": self.total,
            "RatioPct": self.ratio_percent,
            "Steps": self.steps,
            "LR": f"{self.lr:g}",
        }


def run_ablation(base: OcrModel | None, manifest: DatasetManifest, config: TrainConfig, *,
                 grid: Sequence[tuple[str, str]] = ABLATION_GRID, eval_split: str = "test",
                 max_steps: int | None = None) -> tuple[list[AblationRow], list[TrainResult]]:
    """Fine-tune a copy of ``base`` under every strategy pair with the same budget and seed."""
    if base is None:
        raise SetupError("ablation needs a pre-trained base checkpoint")
    rows, results = [], []
    for encoder, decoder in grid:
        cfg = config.with_strategy(encoder, decoder)
        model = prepare_finetune(base, cfg)
        result = train(model, manifest, cfg, max_steps=max_steps)
        report = evaluate(model, manifest, eval_split)
        counts = count_parameters(model)
        rows.append(AblationRow(encoder, decoder, strategy_label(encoder, decoder), report.mixed.cer,
                                report.mixed.f1, int(counts["trainable"]), int(counts["total"]),
                                counts["ratio_percent"], len(result.losses), cfg.learning_rate))
        results.append(result)
        log.info("ablation %s: CER %.4f F1 %.4f", rows[-1].label, rows[-1].cer, rows[-1].f1)
    return rows, results


def ablation_tsv(rows: Sequence[AblationRow]) -> str:
    return format_delimited([r.as_dict() for r in rows])


def ablation_table(rows: Sequence[AblationRow]) -> str:
    return format_aligned([r.as_dict() for r in rows])


def load_base(path: str | Path) -> tuple[OcrModel, Vocabulary]:
    if not Path(path).exists():
        raise SetupError(f"base checkpoint {path} not found")
    model, vocab, _ = checkpoint.load(path)
    return model, vocab
