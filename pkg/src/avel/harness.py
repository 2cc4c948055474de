"""Training, evaluation, ablations, checkpoints, and activation-map export.

Optimization is plain Adam over the hand-written gradients, with stepwise
learning-rate decay, seeded shuffling, early stopping on validation segment
accuracy, and best-checkpoint retention. Parameters live in float32 between
steps (matching the checkpoint format) while every update runs in float64,
so a run is reproducible bit for bit on one machine.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import edrnet, losses, smbfuse
from .avedata import Dataset, VideoRecord, read_blob, write_blob
from .b2ilc import PredictionSequence, correct
from .edrnet import EdrConfig
from .losses import LossWeights

logger = logging.getLogger(__name__)

TASKS = ("SEL", "WSEL")
SOURCES = ("gated", "A", "V")


class CheckpointError(RuntimeError):
    """Raised for unreadable or inconsistent checkpoints."""


@dataclass(frozen=True)
class TrainConfig:
    task: str = "SEL"
    lr: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 300
    lr_decay_every: int = 80
    lr_decay_factor: float = 0.5
    loss: LossWeights = field(default_factory=LossWeights)
    augment: bool = False
    augment_per_class: int = 250
    b2ilc: bool = False
    b2ilc_wr: float = 0.5
    patience: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "WSEL" and self.augment:
            # fused videos have synthetic segment labels; under weak
            # supervision the video-level label alone carries no fusion signal
            raise ValueError("clip fusion augmentation requires segment labels (SEL)")
        if self.lr < 0 or not np.isfinite(self.lr):
            raise ValueError(f"lr must be finite and non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr_decay_every < 0:
            raise ValueError("lr_decay_every must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")


@dataclass(frozen=True)
class EvalReport:
    segment_accuracy: float
    per_class_accuracy: dict[int, float]
    confusion: np.ndarray  # (C, C), rows = true class
    n_segments: int


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: float
    seconds: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    model_cfg: EdrConfig
    log: list[EpochLog]
    best_epoch: int
    best_val_accuracy: float


# ---------------------------------------------------------------------------
# per-record objective


def objective_grads(
    record: VideoRecord,
    model_cfg: EdrConfig,
    params: dict[str, np.ndarray],
    train_cfg: TrainConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact parameter gradients for one video."""
    acts, cache = edrnet.forward_with_cache(record, model_cfg, params)
    background = model_cfg.classes - 1
    if train_cfg.task == "SEL":
        value, dprobs, dfeat = losses.sel_objective_grad(
            acts.seg_probs,
            record.seg_labels,
            acts.features,
            train_cfg.loss,
            background,
        )
        d_logits = edrnet.softmax_rows_vjp(acts.seg_probs, dprobs)
        grads = edrnet.backward(cache, d_logits, dfeat, model_cfg)
    else:
        value, dvideo = losses.wsel_objective_grad(acts.video_probs, record.video_label)
        dprobs = np.tile(dvideo / model_cfg.segments, (model_cfg.segments, 1))
        d_logits = edrnet.softmax_rows_vjp(acts.seg_probs, dprobs)
        grads = edrnet.backward(cache, d_logits, None, model_cfg)
    return value, grads


# ---------------------------------------------------------------------------
# training loop


def _adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    m: dict[str, np.ndarray],
    v: dict[str, np.ndarray],
    step: int,
    lr: float,
    cfg: TrainConfig,
) -> None:
    b1, b2 = cfg.beta1, cfg.beta2
    for name in params:
        g = grads[name]
        m[name] = b1 * m[name] + (1.0 - b1) * g
        v[name] = b2 * v[name] + (1.0 - b2) * g * g
        m_hat = m[name] / (1.0 - b1**step)
        v_hat = v[name] / (1.0 - b2**step)
        updated = params[name].astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        params[name] = updated.astype(np.float32)


def train(
    train_ds: Dataset,
    val_ds: Dataset,
    model_cfg: EdrConfig,
    train_cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Fit the model; returns the best-validation parameters.

    Batches average per-video gradients; a non-finite batch loss aborts with
    diagnostics rather than continuing on garbage. When ``log_path`` is given
    each epoch appends one JSON line there.
    """
    if train_ds.num_classes != model_cfg.classes:
        raise ValueError(
            f"dataset has {train_ds.num_classes} classes, model expects {model_cfg.classes}"
        )
    records = list(train_ds.records)
    if train_cfg.augment:
        fused = smbfuse.augment_dataset(
            train_ds, train_cfg.augment_per_class, train_cfg.seed
        )
        records.extend(fused.dataset.records)
        logger.info("augmentation added %d fused videos", len(fused.dataset.records))
    if not records:
        raise ValueError("training set is empty")

    params = edrnet.init_params(model_cfg)
    m = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}
    v = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}
    rng = np.random.default_rng(train_cfg.seed)
    step = 0
    best_params = {k: p.copy() for k, p in params.items()}
    best_acc = -np.inf
    best_epoch = -1
    bad_epochs = 0
    log: list[EpochLog] = []
    log_file = open(log_path, "a") if log_path is not None else None
    try:
        for epoch in range(train_cfg.epochs):
            started = time.perf_counter()
            if train_cfg.lr_decay_every > 0:
                lr = train_cfg.lr * train_cfg.lr_decay_factor ** (
                    epoch // train_cfg.lr_decay_every
                )
            else:
                lr = train_cfg.lr
            order = rng.permutation(len(records))
            epoch_loss = 0.0
            for lo in range(0, len(order), train_cfg.batch_size):
                batch = order[lo : lo + train_cfg.batch_size]
                total = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}
                batch_loss = 0.0
                for idx in batch:
                    value, grads = objective_grads(
                        records[idx], model_cfg, params, train_cfg
                    )
                    batch_loss += value
                    for name in total:
                        total[name] += grads[name]
                batch_loss /= len(batch)
                if not np.isfinite(batch_loss):
                    raise RuntimeError(
                        f"non-finite training loss {batch_loss} at epoch {epoch}, "
                        f"step {step + 1} (lr={lr:g}); aborting"
                    )
                step += 1
                _adam_step(
                    params,
                    {k: t / len(batch) for k, t in total.items()},
                    m,
                    v,
                    step,
                    lr,
                    train_cfg,
                )
                epoch_loss += batch_loss * len(batch)
            epoch_loss /= len(records)
            report = evaluate(
                val_ds,
                params,
                model_cfg,
                apply_b2ilc=train_cfg.b2ilc,
                wr_threshold=train_cfg.b2ilc_wr,
            )
            entry = EpochLog(
                epoch=epoch,
                lr=lr,
                train_loss=float(epoch_loss),
                val_accuracy=report.segment_accuracy,
                seconds=time.perf_counter() - started,
            )
            log.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(dataclasses.asdict(entry)) + "\n")
                log_file.flush()
            if report.segment_accuracy > best_acc:
                best_acc = report.segment_accuracy
                best_params = {k: p.copy() for k, p in params.items()}
                best_epoch = epoch
                bad_epochs = 0
            else:
                bad_epochs += 1
                if train_cfg.patience > 0 and bad_epochs >= train_cfg.patience:
                    logger.info(
                        "early stop at epoch %d (best %.4f at epoch %d)",
                        epoch,
                        best_acc,
                        best_epoch,
                    )
                    break
    finally:
        if log_file is not None:
            log_file.close()
    if best_epoch < 0:  # zero-epoch run: keep the initialization
        best_params = params
        best_acc = float("nan")
    return TrainResult(
        params=best_params,
        model_cfg=model_cfg,
        log=log,
        best_epoch=best_epoch,
        best_val_accuracy=float(best_acc),
    )


# ---------------------------------------------------------------------------
# evaluation


def predict_segments(
    record: VideoRecord,
    params: dict[str, np.ndarray],
    model_cfg: EdrConfig,
    source: str = "gated",
) -> np.ndarray:
    """Per-segment posteriors from the fused features or a single branch."""
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}, got {source!r}")
    acts = edrnet.forward(record, model_cfg, params)
    if source == "gated":
        return acts.seg_probs
    if source not in acts.rec:
        raise ValueError(f"branch {source!r} is disabled in this configuration")
    _, probs = edrnet.classify(acts.rec[source][-1], params)
    return probs


def build_report(
    true_labels: np.ndarray, pred_labels: np.ndarray, num_classes: int
) -> EvalReport:
    """Segment accuracy, per-class recall, and the confusion matrix."""
    true_labels = np.asarray(true_labels).ravel()
    pred_labels = np.asarray(pred_labels).ravel()
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (true_labels, pred_labels), 1)
    n = int(confusion.sum())
    accuracy = float(np.trace(confusion) / n) if n else float("nan")
    per_class: dict[int, float] = {}
    for c in range(num_classes):
        row = confusion[c].sum()
        if row:
            per_class[c] = float(confusion[c, c] / row)
    return EvalReport(
        segment_accuracy=accuracy,
        per_class_accuracy=per_class,
        confusion=confusion,
        n_segments=n,
    )


def evaluate(
    dataset: Dataset,
    params: dict[str, np.ndarray],
    model_cfg: EdrConfig,
    apply_b2ilc: bool = False,
    wr_threshold: float = 0.5,
    source: str = "gated",
) -> EvalReport:
    background = model_cfg.classes - 1
    trues, preds = [], []
    for rec in dataset.records:
        probs = predict_segments(rec, params, model_cfg, source)
        hard = np.argmax(probs, axis=1).astype(np.int64)
        if apply_b2ilc:
            hard = correct(
                PredictionSequence(hard=hard), background, wr_threshold
            ).hard
        trues.append(np.asarray(rec.seg_labels))
        preds.append(hard)
    if not trues:
        return build_report(np.zeros(0, np.int64), np.zeros(0, np.int64), model_cfg.classes)
    return build_report(np.concatenate(trues), np.concatenate(preds), model_cfg.classes)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_save(
    params: dict[str, np.ndarray], model_cfg: EdrConfig, out_dir: str | Path
) -> Path:
    """One float32 blob per tensor plus an index mapping names to files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"config": dataclasses.asdict(model_cfg), "params": {}}
    for name in sorted(params):
        filename = f"{name}.avet"
        write_blob(out_dir / filename, params[name])
        index["params"][name] = filename
    path = out_dir / "index.json"
    with open(path, "w") as fh:
        json.dump(index, fh, indent=2)
        fh.write("\n")
    return path


def checkpoint_load(
    ckpt_dir: str | Path, expected: EdrConfig | None = None
) -> tuple[dict[str, np.ndarray], EdrConfig]:
    """Load and cross-check a checkpoint; mismatches name the offending field."""
    ckpt_dir = Path(ckpt_dir)
    index_path = ckpt_dir / "index.json"
    try:
        with open(index_path) as fh:
            index = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint index {index_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint index {index_path} is corrupt: {exc}") from exc
    try:
        cfg = EdrConfig(**index["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc
    if expected is not None and expected != cfg:
        diffs = [
            f.name
            for f in dataclasses.fields(EdrConfig)
            if getattr(expected, f.name) != getattr(cfg, f.name)
        ]
        raise CheckpointError(
            f"checkpoint config disagrees with the expected one on: {', '.join(diffs)}"
        )
    shapes = edrnet.param_shapes(cfg)
    stored = index.get("params", {})
    missing = sorted(set(shapes) - set(stored))
    extra = sorted(set(stored) - set(shapes))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint parameter set mismatch (missing: {missing}, extra: {extra})"
        )
    params: dict[str, np.ndarray] = {}
    for name, filename in stored.items():
        try:
            arr = read_blob(ckpt_dir / filename)
        except ValueError as exc:  # BlobError included
            raise CheckpointError(f"parameter {name}: {exc}") from exc
        if arr.shape != shapes[name]:
            raise CheckpointError(
                f"parameter {name} has shape {arr.shape}, expected {shapes[name]}"
            )
        params[name] = arr
    return params, cfg


# ---------------------------------------------------------------------------
# activation-map export


def _write_pgm(path: Path, image01: np.ndarray) -> None:
    pixels = np.clip(np.round(image01 * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def export_cams(
    records: list[VideoRecord] | tuple[VideoRecord, ...],
    params: dict[str, np.ndarray],
    model_cfg: EdrConfig,
    out_dir: str | Path,
) -> list[Path]:
    """Write one 8-bit PGM per sliding window per enabled visual source."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = [s for s in (edrnet.BRANCH_V, edrnet.BRANCH_AV) if s in model_cfg.dec_branches]
    written: list[Path] = []
    for rec in records:
        acts = edrnet.forward(rec, model_cfg, params)
        for source in sources:
            maps = edrnet.cam_extract(acts, model_cfg, params, source)
            for t in range(maps.shape[0]):
                path = out_dir / f"{rec.id}_{source}_{t}.pgm"
                _write_pgm(path, maps[t])
                written.append(path)
    return written


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationRow:
    name: str
    model_cfg: EdrConfig
    train_cfg: TrainConfig
    reports: dict[str, EvalReport]


def _eval_sources(cfg: EdrConfig) -> list[str]:
    if cfg.has_gate:
        return ["A", "V", "gated"]
    return [cfg.rec_branches[0]]


def run_ablation(
    suite: str,
    data: tuple[Dataset, Dataset, Dataset],
    model_cfg: EdrConfig,
    train_cfg: TrainConfig,
    widths: tuple[int, ...] = (256, 512, 768, 1024, 1280, 1536),
    sample_counts: tuple[int, ...] = (50, 100, 150, 200, 250, 300, 350, 400),
) -> list[AblationRow]:
    """Train/evaluate a family of single-change variants of the base setup.

    Suites: "components" toggles label correction, the patch-contrast term,
    and fusion augmentation cumulatively; "branches" enumerates branch
    subsets; "kernel" sweeps k at maximal depth; "depth" sweeps depth at
    fixed k; "width" and "augmentation" sweep their argument lists;
    "positional" toggles the position table. Each row reports the test
    metrics per prediction source.
    """
    train_ds, val_ds, test_ds = data
    variants: list[tuple[str, EdrConfig, TrainConfig]] = []
    replace = dataclasses.replace
    if suite == "components":
        base_loss = train_cfg.loss
        no_reg = replace(train_cfg, loss=replace(base_loss, lambda2=0.0))
        variants.append(("base", model_cfg, replace(no_reg, b2ilc=False, augment=False)))
        variants.append(("+correction", model_cfg, replace(no_reg, b2ilc=True, augment=False)))
        if train_cfg.task == "SEL":
            with_reg = replace(train_cfg, b2ilc=True, augment=False)
            variants.append(("+patch-contrast", model_cfg, with_reg))
            variants.append(("+fusion", model_cfg, replace(with_reg, augment=True)))
    elif suite == "branches":
        combos = [
            ("A-only", dict(branch_a=True, branch_v=False, branch_av=False)),
            ("V-only", dict(branch_a=False, branch_v=True, branch_av=False)),
            ("A+AV", dict(branch_a=True, branch_v=False, branch_av=True)),
            ("V+AV", dict(branch_a=False, branch_v=True, branch_av=True)),
            ("A+V", dict(branch_a=True, branch_v=True, branch_av=False)),
            ("A+V+AV", dict(branch_a=True, branch_v=True, branch_av=True)),
        ]
        for name, flags in combos:
            variants.append((name, replace(model_cfg, **flags), train_cfg))
    elif suite == "kernel":
        for k in (2, 3, 4, 5):
            layers = edrnet.max_layers(k, model_cfg.segments)
            variants.append((f"k={k}", replace(model_cfg, k=k, layers=layers), train_cfg))
    elif suite == "depth":
        for depth in range(1, edrnet.max_layers(model_cfg.k, model_cfg.segments) + 1):
            variants.append((f"L={depth}", replace(model_cfg, layers=depth), train_cfg))
    elif suite == "width":
        for width in widths:
            variants.append((f"d={width}", replace(model_cfg, width=width), train_cfg))
    elif suite == "augmentation":
        for count in sample_counts:
            variants.append(
                (
                    f"fused={count}",
                    model_cfg,
                    replace(train_cfg, augment=True, augment_per_class=count),
                )
            )
    elif suite == "positional":
        variants.append(("pe-on", replace(model_cfg, positional=True), train_cfg))
        variants.append(("pe-off", replace(model_cfg, positional=False), train_cfg))
    else:
        raise ValueError(f"unknown ablation suite {suite!r}")

    rows: list[AblationRow] = []
    for name, m_cfg, t_cfg in variants:
        result = train(train_ds, val_ds, m_cfg, t_cfg)
        reports = {
            source: evaluate(
                test_ds,
                result.params,
                m_cfg,
                apply_b2ilc=t_cfg.b2ilc,
                wr_threshold=t_cfg.b2ilc_wr,
                source=source,
            )
            for source in _eval_sources(m_cfg)
        }
        rows.append(AblationRow(name=name, model_cfg=m_cfg, train_cfg=t_cfg, reports=reports))
        logger.info(
            "ablation %s/%s: %s",
            suite,
            name,
            {k: round(r.segment_accuracy, 4) for k, r in reports.items()},
        )
    return rows
