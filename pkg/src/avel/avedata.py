"""Data model and on-disk formats for segment-level audio-visual videos.

A video is a fixed number of one-second segments (10 by convention). Each
segment carries an audio embedding of ``d_a`` floats, a visual feature map of
``S`` spatial positions by ``d_v`` channels, and an integer event label. The
last class index is reserved for "background". A dataset is a list of such
records plus the class-name table and a split tag.

Persistence is deliberately dumb: one little-endian float32 tensor blob per
modality per video, referenced from a JSON manifest. Blobs round-trip
bit-exactly, which the augmentation provenance checks and checkpoint tests
rely on.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BLOB_MAGIC = b"AVET"
SEGMENTS = 10  # one-second segments per video


class DataError(ValueError):
    """Raised for malformed datasets, manifests, or records."""


class BlobError(DataError):
    """Raised for malformed tensor blob files."""


# ---------------------------------------------------------------------------
# tensor blobs


def write_blob(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` as a float32 little-endian blob.

    Layout: magic ``AVET``, uint32 rank, ``rank`` uint32 dims, then the
    row-major payload. Input is cast to float32; callers that care about
    bit-exact round trips must store float32 to begin with.
    """
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim:  # ascontiguousarray would promote 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_blob(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise BlobError(f"{path}: cannot read blob ({exc})") from exc
    if len(data) < 8:
        raise BlobError(f"{path}: truncated header")
    if data[:4] != BLOB_MAGIC:
        raise BlobError(f"{path}: bad magic {data[:4]!r}, expected {BLOB_MAGIC!r}")
    (rank,) = struct.unpack_from("<I", data, 4)
    header_end = 8 + 4 * rank
    if len(data) < header_end:
        raise BlobError(f"{path}: truncated dimension list (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = math.prod(dims) if rank else 1
    expected = header_end + 4 * count
    if len(data) != expected:
        raise BlobError(
            f"{path}: payload is {len(data) - header_end} bytes, "
            f"expected {4 * count} for dims {dims}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=header_end, count=count)
    return flat.reshape(dims).copy()


# ---------------------------------------------------------------------------
# records and datasets


@dataclass(frozen=True)
class VideoRecord:
    """One video: per-segment features and labels.

    audio       (N, d_a) float32
    visual      (N, S, d_v) float32, S spatial positions per segment
    seg_labels  (N,) int64 class index per segment
    video_label int, the single foreground class, or background if none
    """

    id: str
    audio: np.ndarray
    visual: np.ndarray
    seg_labels: np.ndarray
    video_label: int

    @property
    def segments(self) -> int:
        return int(self.audio.shape[0])


@dataclass(frozen=True)
class Dataset:
    records: tuple[VideoRecord, ...]
    class_names: tuple[str, ...]
    split: str = "train"

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def background_index(self) -> int:
        return len(self.class_names) - 1

    def __len__(self) -> int:
        return len(self.records)


def _runs(values: np.ndarray) -> list[tuple[int, int, int]]:
    """Maximal runs of equal values as (start, end_inclusive, value)."""
    out = []
    start = 0
    for i in range(1, len(values) + 1):
        if i == len(values) or values[i] != values[start]:
            out.append((start, i - 1, int(values[start])))
            start = i
    return out


def validate_record(
    record: VideoRecord, num_classes: int, segments: int = SEGMENTS
) -> list[str]:
    """Return a list of human-readable invariant violations (empty if clean).

    Checks shapes, label ranges, finiteness, the single-foreground-class rule,
    the minimum event length of two segments, and agreement between segment
    labels and the video-level label.
    """
    v: list[str] = []
    audio = np.asarray(record.audio)
    visual = np.asarray(record.visual)
    labels = np.asarray(record.seg_labels)
    if audio.ndim != 2:
        v.append(f"audio must be 2-d (segments, d_a), got ndim={audio.ndim}")
    if visual.ndim != 3:
        v.append(f"visual must be 3-d (segments, S, d_v), got ndim={visual.ndim}")
    if labels.ndim != 1:
        v.append(f"seg_labels must be 1-d, got ndim={labels.ndim}")
    if v:
        return v
    if not (audio.shape[0] == visual.shape[0] == labels.shape[0] == segments):
        v.append(
            f"segment counts disagree: audio={audio.shape[0]} "
            f"visual={visual.shape[0]} labels={labels.shape[0]} expected={segments}"
        )
        return v
    if not np.issubdtype(labels.dtype, np.integer):
        v.append(f"seg_labels must be integers, got dtype {labels.dtype}")
        return v
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        t = int(np.argmax(bad))
        v.append(f"segment label out of range at t={t}: {int(labels[t])}")
    if not 0 <= record.video_label < num_classes:
        v.append(f"video_label out of range: {record.video_label}")
    if v:
        return v
    background = num_classes - 1
    fg_classes = sorted({int(c) for c in labels if c != background})
    if len(fg_classes) > 1:
        v.append(f"more than one foreground class present: {fg_classes}")
    elif len(fg_classes) == 1:
        if record.video_label != fg_classes[0]:
            v.append(
                f"video_label {record.video_label} disagrees with "
                f"foreground class {fg_classes[0]}"
            )
    else:
        if record.video_label != background:
            v.append(
                f"no foreground segments but video_label is {record.video_label}, "
                f"expected background {background}"
            )
    for start, end, value in _runs(labels):
        if value != background and end - start + 1 < 2:
            v.append(f"foreground run of length 1 at segment {start}")
    if not np.isfinite(audio).all():
        t, d = np.argwhere(~np.isfinite(audio))[0]
        v.append(f"non-finite audio value at (t={t}, dim={d})")
    if not np.isfinite(visual).all():
        t, s, d = np.argwhere(~np.isfinite(visual))[0]
        v.append(f"non-finite visual value at (t={t}, pos={s}, dim={d})")
    return v


# ---------------------------------------------------------------------------
# synthetic data

# Total class count includes the background class, so classes=6 means five
# foreground event categories plus background.


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 6
    videos_per_class: int = 5
    d_a: int = 8
    d_v: int = 16
    spatial_size: int = 4
    separation: float = 3.0
    seed: int = 0
    segments: int = SEGMENTS

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise DataError("need at least one foreground class plus background")
        if self.videos_per_class < 1:
            raise DataError("videos_per_class must be positive")
        if min(self.d_a, self.d_v, self.spatial_size) < 1:
            raise DataError("feature dimensions must be positive")
        if self.segments < 2:
            raise DataError("segments must be at least 2")
        if not (np.isfinite(self.separation) and self.separation >= 0):
            raise DataError("separation must be finite and non-negative")


def _unit_direction(rng: np.random.Generator, dim: int) -> np.ndarray:
    u = rng.standard_normal(dim)
    return u / max(float(np.linalg.norm(u)), 1e-12)


def synth_dataset(cfg: SynthConfig) -> Dataset:
    """Gaussian segment features with class-conditional mean shifts.

    Foreground videos carry one contiguous event span of length uniform in
    [2, N]; segments inside the span are shifted by ``separation`` along a
    fixed per-class unit direction in each modality. Background videos are
    pure noise. separation=0 makes classes statistically indistinguishable,
    which is useful as a null fixture. Deterministic in ``seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    n_fg = cfg.classes - 1
    background = cfg.classes - 1
    audio_dirs = np.stack([_unit_direction(rng, cfg.d_a) for _ in range(n_fg)])
    visual_dirs = np.stack([_unit_direction(rng, cfg.d_v) for _ in range(n_fg)])
    records = []
    for c in range(cfg.classes):
        for i in range(cfg.videos_per_class):
            audio = rng.standard_normal((cfg.segments, cfg.d_a))
            visual = rng.standard_normal((cfg.segments, cfg.spatial_size, cfg.d_v))
            labels = np.full(cfg.segments, background, dtype=np.int64)
            if c != background:
                span = int(rng.integers(2, cfg.segments + 1))
                start = int(rng.integers(0, cfg.segments - span + 1))
                labels[start : start + span] = c
                audio[start : start + span] += cfg.separation * audio_dirs[c]
                visual[start : start + span] += cfg.separation * visual_dirs[c]
            records.append(
                VideoRecord(
                    id=f"synth_{c:02d}_{i:03d}",
                    audio=audio.astype(np.float32),
                    visual=visual.astype(np.float32),
                    seg_labels=labels,
                    video_label=c,
                )
            )
    names = tuple(f"event_{i:02d}" for i in range(n_fg)) + ("background",)
    return Dataset(records=tuple(records), class_names=names, split="train")


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write blobs plus ``manifest.json`` under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    blob_dir = out_dir / "blobs"
    blob_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in dataset.records:
        audio_rel = f"blobs/{rec.id}_audio.avet"
        visual_rel = f"blobs/{rec.id}_visual.avet"
        write_blob(out_dir / audio_rel, rec.audio)
        write_blob(out_dir / visual_rel, rec.visual)
        entries.append(
            {
                "id": rec.id,
                "video_label": int(rec.video_label),
                "audio_blob": audio_rel,
                "visual_blob": visual_rel,
                "seg_labels": [int(x) for x in rec.seg_labels],
            }
        )
    manifest = {
        "class_names": list(dataset.class_names),
        "split": dataset.split,
        "records": entries,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def load_dataset(path: str | Path, segments: int = SEGMENTS) -> Dataset:
    """Load a manifest (or a directory containing ``manifest.json``).

    Every record is validated; the first violation aborts the load with a
    DataError naming the offending record.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    for key in ("class_names", "records"):
        if key not in manifest:
            raise DataError(f"manifest {path} missing key {key!r}")
    class_names = tuple(str(n) for n in manifest["class_names"])
    if len(class_names) < 2:
        raise DataError("manifest must name at least two classes")
    base = path.parent
    records = []
    dims: tuple | None = None
    for entry in manifest["records"]:
        try:
            rid = str(entry["id"])
            audio = read_blob(base / entry["audio_blob"])
            visual = read_blob(base / entry["visual_blob"])
            labels = np.asarray(entry["seg_labels"], dtype=np.int64)
            video_label = int(entry["video_label"])
        except BlobError as exc:
            raise DataError(f"record {entry.get('id', '?')}: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"record {entry.get('id', '?')}: bad entry ({exc})") from exc
        rec = VideoRecord(rid, audio, visual, labels, video_label)
        problems = validate_record(rec, len(class_names), segments)
        if problems:
            raise DataError(f"record {rid}: " + "; ".join(problems))
        if dims is None:
            dims = (audio.shape[1], visual.shape[1], visual.shape[2])
        elif dims != (audio.shape[1], visual.shape[1], visual.shape[2]):
            raise DataError(
                f"record {rid}: feature dims {audio.shape[1]}/{visual.shape[1]}/"
                f"{visual.shape[2]} disagree with earlier records {dims}"
            )
        records.append(rec)
    split = str(manifest.get("split", "train"))
    return Dataset(records=tuple(records), class_names=class_names, split=split)


# ---------------------------------------------------------------------------
# splitting


def split_dataset(
    dataset: Dataset, fractions: tuple[float, float, float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Class-stratified train/val/test split.

    Per class, records are shuffled and apportioned by largest remainder,
    with leftover slots steered toward whichever split has accumulated the
    largest deficit so far (ties broken train, val, test). Fractions must sum
    to 1. Deterministic in ``seed``; the three parts partition the input.
    """
    f = tuple(float(x) for x in fractions)
    if len(f) != 3 or any(x < 0 for x in f):
        raise DataError(f"fractions must be three non-negative numbers, got {fractions}")
    if abs(sum(f) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {sum(f)}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for idx, rec in enumerate(dataset.records):
        by_class.setdefault(rec.video_label, []).append(idx)
    picked: tuple[list[int], ...] = ([], [], [])
    deficit = [0.0, 0.0, 0.0]
    for label in sorted(by_class):
        idxs = [by_class[label][j] for j in rng.permutation(len(by_class[label]))]
        ideal = [fi * len(idxs) for fi in f]
        counts = [int(math.floor(x)) for x in ideal]
        leftover = len(idxs) - sum(counts)
        order = sorted(range(3), key=lambda s: (-(ideal[s] - counts[s] + deficit[s]), s))
        for s in order[:leftover]:
            counts[s] += 1
        pos = 0
        for s in range(3):
            picked[s].extend(idxs[pos : pos + counts[s]])
            pos += counts[s]
            deficit[s] += ideal[s] - counts[s]
    names = ("train", "val", "test")
    out = []
    for s, split_name in enumerate(names):
        recs = tuple(dataset.records[i] for i in sorted(picked[s]))
        out.append(Dataset(records=recs, class_names=dataset.class_names, split=split_name))
    return out[0], out[1], out[2]


# ---------------------------------------------------------------------------
# released-feature import


def load_ave_release(
    root: str | Path, split: str = "train", class_names: tuple[str, ...] | None = None
) -> Dataset:
    """Adapter for the released precomputed AVE feature bundle.

    Expects ``audio_feature.h5`` (V, 10, 128), ``visual_feature.h5``
    (V, 10, 7, 7, 512), ``labels.h5`` one-hot (V, 10, 29) and
    ``{split}_order.h5`` index lists next to each other under ``root``.
    The 7x7 grid is flattened to S=49. Only needed for experiments on the
    real corpus; synthetic data covers everything else.
    """
    import h5py  # optional dependency, only needed for the released bundle

    root = Path(root)

    def first(path: Path) -> np.ndarray:
        with h5py.File(path, "r") as fh:
            key = next(iter(fh.keys()))
            return np.asarray(fh[key])

    audio = first(root / "audio_feature.h5")
    visual = first(root / "visual_feature.h5")
    onehot = first(root / "labels.h5")
    order = first(root / f"{split}_order.h5").astype(np.int64).ravel()
    n, segs = audio.shape[0], audio.shape[1]
    num_classes = onehot.shape[-1]
    visual = visual.reshape(n, segs, -1, visual.shape[-1])
    labels = np.argmax(onehot, axis=-1).astype(np.int64)
    if class_names is None:
        class_names = tuple(f"class_{i:02d}" for i in range(num_classes - 1)) + (
            "background",
        )
    records = []
    for idx in order:
        seg = labels[idx]
        fg = seg[seg != num_classes - 1]
        video_label = int(fg[0]) if fg.size else num_classes - 1
        records.append(
            VideoRecord(
                id=f"ave_{int(idx):05d}",
                audio=np.ascontiguousarray(audio[idx], dtype=np.float32),
                visual=np.ascontiguousarray(visual[idx], dtype=np.float32),
                seg_labels=seg,
                video_label=video_label,
            )
        )
    return Dataset(records=tuple(records), class_names=class_names, split=split)
