"""Command-line front end.

Subcommands: ``data synth|validate|split``, ``augment``, ``correct``,
``train``, ``eval``, ``ablate``, ``cam``. Model and training options come
from a flat JSON config file whose keys mirror the EdrConfig / TrainConfig
field names (plus lambda1/lambda2/margin for the loss weights); ``seed``
applies to both. ``--seed`` on the command line wins over the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, smbfuse
from .avedata import (
    DataError,
    SynthConfig,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_dataset,
    validate_record,
)
from .b2ilc import PredictionSequence, correct
from .edrnet import EdrConfig
from .harness import TrainConfig, checkpoint_load, checkpoint_save
from .losses import LossWeights

logger = logging.getLogger(__name__)

_MODEL_FIELDS = {f.name for f in dataclasses.fields(EdrConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"loss"}
_LOSS_FIELDS = {f.name for f in dataclasses.fields(LossWeights)}


def load_configs(
    config_path: str | None, seed: int | None = None
) -> tuple[EdrConfig, TrainConfig]:
    """Build both configs from one flat JSON mapping."""
    raw: dict = {}
    if config_path is not None:
        with open(config_path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError(f"config {config_path} must hold a JSON object")
    unknown = set(raw) - _MODEL_FIELDS - _TRAIN_FIELDS - _LOSS_FIELDS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if seed is not None:
        raw = dict(raw, seed=seed)
    model_kwargs = {k: v for k, v in raw.items() if k in _MODEL_FIELDS}
    loss_kwargs = {k: v for k, v in raw.items() if k in _LOSS_FIELDS}
    train_kwargs = {k: v for k, v in raw.items() if k in _TRAIN_FIELDS}
    if loss_kwargs:
        train_kwargs["loss"] = LossWeights(**loss_kwargs)
    return EdrConfig(**model_kwargs), TrainConfig(**train_kwargs)


def _report_dict(report: harness.EvalReport) -> dict:
    return {
        "segment_accuracy": report.segment_accuracy,
        "n_segments": report.n_segments,
        "per_class_accuracy": {str(k): v for k, v in report.per_class_accuracy.items()},
        "confusion": report.confusion.tolist(),
    }


# ---------------------------------------------------------------------------
# subcommands


def _cmd_data(args: argparse.Namespace) -> int:
    if args.data_cmd == "synth":
        cfg = SynthConfig(
            classes=args.classes,
            videos_per_class=args.videos_per_class,
            d_a=args.d_a,
            d_v=args.d_v,
            spatial_size=args.spatial_size,
            separation=args.separation,
            seed=args.seed,
        )
        ds = synth_dataset(cfg)
        manifest = save_dataset(ds, args.out)
        print(f"wrote {len(ds)} records ({ds.num_classes} classes) to {manifest}")
        return 0
    if args.data_cmd == "validate":
        ds = load_dataset(args.inp)  # load already validates; re-check and report
        problems = 0
        for rec in ds.records:
            for msg in validate_record(rec, ds.num_classes):
                print(f"{rec.id}: {msg}")
                problems += 1
        print(f"{len(ds)} records, {problems} violations")
        return 0 if problems == 0 else 1
    if args.data_cmd == "split":
        ds = load_dataset(args.inp)
        fractions = tuple(float(x) for x in args.fractions.split(","))
        parts = split_dataset(ds, fractions, args.seed)
        out = Path(args.out)
        for part in parts:
            save_dataset(part, out / part.split)
            print(f"{part.split}: {len(part)} records")
        return 0
    raise AssertionError(args.data_cmd)


def _cmd_augment(args: argparse.Namespace) -> int:
    ds = load_dataset(args.inp)
    result = smbfuse.augment_dataset(ds, args.per_class, args.seed)
    out = Path(args.out)
    save_dataset(result.dataset, out)
    prov_dir = out / "provenance"
    prov_dir.mkdir(parents=True, exist_ok=True)
    for rec_id, slots in result.provenance.items():
        payload = [
            {
                "state": slot.state.value,
                "source_video": slot.source_video,
                "seg_range": list(slot.seg_range),
            }
            for slot in slots
        ]
        with open(prov_dir / f"{rec_id}.json", "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    print(f"wrote {len(result.dataset)} fused records to {out}")
    return 0


def _cmd_correct(args: argparse.Namespace) -> int:
    with open(args.inp) as fh:
        predictions = json.load(fh)
    background = args.classes - 1
    corrected = {}
    for video_id, hard in predictions.items():
        seq = PredictionSequence(hard=np.asarray(hard, dtype=np.int64))
        corrected[video_id] = [int(x) for x in correct(seq, background, args.wr).hard]
    with open(args.out, "w") as fh:
        json.dump(corrected, fh, indent=2)
        fh.write("\n")
    changed = sum(
        1 for vid in predictions if list(map(int, predictions[vid])) != corrected[vid]
    )
    print(f"corrected {changed} of {len(predictions)} sequences -> {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    model_cfg, train_cfg = load_configs(args.config, args.seed)
    train_ds = load_dataset(args.train)
    val_ds = load_dataset(args.val)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = harness.train(
        train_ds, val_ds, model_cfg, train_cfg, log_path=out / "log.ndjson"
    )
    checkpoint_save(result.params, model_cfg, out / "checkpoint")
    print(
        f"best val segment accuracy {result.best_val_accuracy:.4f} "
        f"at epoch {result.best_epoch}; checkpoint in {out / 'checkpoint'}"
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    params, model_cfg = checkpoint_load(args.checkpoint)
    ds = load_dataset(args.inp)
    report = harness.evaluate(
        ds,
        params,
        model_cfg,
        apply_b2ilc=args.b2ilc,
        wr_threshold=args.wr,
        source=args.source,
    )
    print(json.dumps(_report_dict(report), indent=2))
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    model_cfg, train_cfg = load_configs(args.config, args.seed)
    data = (
        load_dataset(args.train),
        load_dataset(args.val),
        load_dataset(args.test),
    )
    rows = harness.run_ablation(args.suite, data, model_cfg, train_cfg)
    payload = [
        {
            "name": row.name,
            "model": dataclasses.asdict(row.model_cfg),
            "train": dataclasses.asdict(row.train_cfg),
            "reports": {src: _report_dict(rep) for src, rep in row.reports.items()},
        }
        for row in rows
    ]
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    for row in rows:
        accs = ", ".join(
            f"{src}={rep.segment_accuracy:.4f}" for src, rep in row.reports.items()
        )
        print(f"{args.suite}/{row.name}: {accs}")
    return 0


def _cmd_cam(args: argparse.Namespace) -> int:
    params, model_cfg = checkpoint_load(args.checkpoint)
    ds = load_dataset(args.inp)
    records = list(ds.records)
    if args.limit is not None:
        records = records[: args.limit]
    written = harness.export_cams(records, params, model_cfg, args.out)
    print(f"wrote {len(written)} activation maps to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avel",
        description="Audio-visual event localization: data, training, and analysis tools.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_data = sub.add_parser("data", help="synthetic data, validation, splitting")
    data_sub = p_data.add_subparsers(dest="data_cmd", required=True)
    p_synth = data_sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--classes", type=int, default=6, help="total classes incl. background")
    p_synth.add_argument("--videos-per-class", type=int, default=5)
    p_synth.add_argument("--d-a", type=int, default=8)
    p_synth.add_argument("--d-v", type=int, default=16)
    p_synth.add_argument("--spatial-size", type=int, default=4)
    p_synth.add_argument("--separation", type=float, default=3.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_validate = data_sub.add_parser("validate", help="check a manifest's invariants")
    p_validate.add_argument("--in", dest="inp", required=True)
    p_split = data_sub.add_parser("split", help="stratified train/val/test split")
    p_split.add_argument("--in", dest="inp", required=True)
    p_split.add_argument("--fractions", default="0.8,0.1,0.1")
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--out", required=True)

    p_aug = sub.add_parser("augment", help="state-machine clip fusion")
    p_aug.add_argument("--in", dest="inp", required=True)
    p_aug.add_argument("--per-class", type=int, default=250)
    p_aug.add_argument("--seed", type=int, default=0)
    p_aug.add_argument("--out", required=True)

    p_corr = sub.add_parser("correct", help="bag-level label correction")
    p_corr.add_argument("--in", dest="inp", required=True)
    p_corr.add_argument("--out", required=True)
    p_corr.add_argument("--wr", type=float, default=0.5, help="witness-rate threshold")
    p_corr.add_argument("--classes", type=int, default=29, help="total classes incl. background")

    p_train = sub.add_parser("train", help="fit a model")
    p_train.add_argument("--config", help="flat JSON config")
    p_train.add_argument("--train", required=True)
    p_train.add_argument("--val", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--in", dest="inp", required=True)
    p_eval.add_argument("--b2ilc", action="store_true")
    p_eval.add_argument("--wr", type=float, default=0.5)
    p_eval.add_argument("--source", default="gated", choices=list(harness.SOURCES))

    p_abl = sub.add_parser("ablate", help="run an ablation suite")
    p_abl.add_argument("--suite", required=True)
    p_abl.add_argument("--config", help="flat JSON config")
    p_abl.add_argument("--train", required=True)
    p_abl.add_argument("--val", required=True)
    p_abl.add_argument("--test", required=True)
    p_abl.add_argument("--seed", type=int, default=None)
    p_abl.add_argument("--out", required=True)

    p_cam = sub.add_parser("cam", help="export class activation maps")
    p_cam.add_argument("--checkpoint", required=True)
    p_cam.add_argument("--in", dest="inp", required=True)
    p_cam.add_argument("--limit", type=int, default=None)
    p_cam.add_argument("--out", required=True)
    return parser


_HANDLERS = {
    "data": _cmd_data,
    "augment": _cmd_augment,
    "correct": _cmd_correct,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "cam": _cmd_cam,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _HANDLERS[args.cmd](args)
    except (DataError, smbfuse.SmbError, harness.CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
