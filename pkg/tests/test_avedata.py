import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avel.avedata import (
    BlobError,
    DataError,
    SynthConfig,
    VideoRecord,
    load_dataset,
    read_blob,
    save_dataset,
    split_dataset,
    synth_dataset,
    validate_record,
    write_blob,
)


def _dataset_bytes(ds):
    chunks = []
    for rec in ds.records:
        chunks.append(rec.id.encode())
        chunks.append(rec.audio.tobytes())
        chunks.append(rec.visual.tobytes())
        chunks.append(rec.seg_labels.tobytes())
        chunks.append(bytes([rec.video_label]))
    return b"".join(chunks)


class TestBlobs:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_bit_exact(self, seed):
        rng = np.random.default_rng(seed)
        rank = int(rng.integers(1, 5))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(rank))
        arr = rng.standard_normal(shape).astype(np.float32)
        path = None
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/x.avet"
            write_blob(path, arr)
            back = read_blob(path)
            assert back.dtype == np.float32
            assert back.shape == arr.shape
            assert back.tobytes() == arr.tobytes()

    def test_scalar_rank_zero(self, tmp_path):
        write_blob(tmp_path / "s.avet", np.float32(3.5))
        back = read_blob(tmp_path / "s.avet")
        assert back.shape == ()
        assert back == np.float32(3.5)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.avet"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(BlobError, match="magic"):
            read_blob(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.avet"
        write_blob(p, np.ones((3, 3), np.float32))
        data = p.read_bytes()
        p.write_bytes(data[:-4])
        with pytest.raises(BlobError, match="payload"):
            read_blob(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "h.avet"
        p.write_bytes(b"AVET\x03")
        with pytest.raises(BlobError, match="truncated"):
            read_blob(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(BlobError, match="cannot read"):
            read_blob(tmp_path / "absent.avet")


def _clean_record(seed=0, classes=5, label=1, span=(2, 6)):
    rng = np.random.default_rng(seed)
    labels = np.full(10, classes - 1, dtype=np.int64)
    if label != classes - 1:
        labels[span[0] : span[1] + 1] = label
    return VideoRecord(
        id=f"rec{seed}",
        audio=rng.standard_normal((10, 4)).astype(np.float32),
        visual=rng.standard_normal((10, 4, 6)).astype(np.float32),
        seg_labels=labels,
        video_label=label,
    )


class TestValidateRecord:
    def test_clean(self):
        assert validate_record(_clean_record(), 5) == []

    def test_clean_background(self):
        assert validate_record(_clean_record(label=4), 5) == []

    def test_short_run(self):
        rec = _clean_record(span=(3, 3))
        msgs = validate_record(rec, 5)
        assert any("length 1" in m for m in msgs)

    def test_two_foreground_classes(self):
        rec = _clean_record()
        labels = rec.seg_labels.copy()
        labels[7:9] = 2
        bad = VideoRecord(rec.id, rec.audio, rec.visual, labels, rec.video_label)
        msgs = validate_record(bad, 5)
        assert any("more than one foreground class" in m for m in msgs)

    def test_video_label_disagrees(self):
        rec = _clean_record()
        bad = VideoRecord(rec.id, rec.audio, rec.visual, rec.seg_labels, 3)
        msgs = validate_record(bad, 5)
        assert any("disagrees" in m for m in msgs)

    def test_background_video_wrong_label(self):
        rec = _clean_record(label=4)
        bad = VideoRecord(rec.id, rec.audio, rec.visual, rec.seg_labels, 2)
        msgs = validate_record(bad, 5)
        assert any("expected background" in m for m in msgs)

    def test_label_out_of_range(self):
        rec = _clean_record()
        labels = rec.seg_labels.copy()
        labels[0] = 17
        bad = VideoRecord(rec.id, rec.audio, rec.visual, labels, rec.video_label)
        msgs = validate_record(bad, 5)
        assert any("out of range at t=0" in m for m in msgs)

    def test_nan_audio_located(self):
        rec = _clean_record()
        audio = rec.audio.copy()
        audio[3, 2] = np.nan
        bad = VideoRecord(rec.id, audio, rec.visual, rec.seg_labels, rec.video_label)
        msgs = validate_record(bad, 5)
        assert any("(t=3, dim=2)" in m for m in msgs)

    def test_inf_visual_located(self):
        rec = _clean_record()
        visual = rec.visual.copy()
        visual[1, 2, 3] = np.inf
        bad = VideoRecord(rec.id, rec.audio, visual, rec.seg_labels, rec.video_label)
        msgs = validate_record(bad, 5)
        assert any("(t=1, pos=2, dim=3)" in m for m in msgs)

    def test_wrong_segment_count(self):
        rec = _clean_record()
        bad = VideoRecord(rec.id, rec.audio[:9], rec.visual, rec.seg_labels, rec.video_label)
        msgs = validate_record(bad, 5)
        assert any("segment counts disagree" in m for m in msgs)


class TestSynth:
    def test_deterministic(self):
        cfg = SynthConfig(classes=4, videos_per_class=3, seed=7)
        assert _dataset_bytes(synth_dataset(cfg)) == _dataset_bytes(synth_dataset(cfg))

    def test_all_records_valid(self):
        ds = synth_dataset(SynthConfig(classes=6, videos_per_class=4, seed=3))
        assert len(ds) == 24
        for rec in ds.records:
            assert validate_record(rec, ds.num_classes) == []

    def test_one_contiguous_span(self):
        ds = synth_dataset(SynthConfig(classes=5, videos_per_class=6, seed=5))
        for rec in ds.records:
            fg = rec.seg_labels != ds.background_index
            if rec.video_label == ds.background_index:
                assert not fg.any()
            else:
                idx = np.flatnonzero(fg)
                assert len(idx) >= 2
                assert idx[-1] - idx[0] + 1 == len(idx)  # contiguous

    def test_separation_shifts_means(self):
        strong = synth_dataset(SynthConfig(classes=3, videos_per_class=8, separation=6.0, seed=1))
        gaps = []
        for rec in strong.records:
            if rec.video_label == strong.background_index:
                continue
            fg = rec.seg_labels != strong.background_index
            gaps.append(
                float(np.linalg.norm(rec.audio[fg].mean(0) - rec.audio[~fg].mean(0)))
                if (~fg).any()
                else float(np.linalg.norm(rec.audio[fg].mean(0)))
            )
        assert np.median(gaps) > 3.0  # shift of 6 along a unit direction

    def test_zero_separation_allowed(self):
        ds = synth_dataset(SynthConfig(classes=3, videos_per_class=2, separation=0.0, seed=2))
        for rec in ds.records:
            assert validate_record(rec, ds.num_classes) == []

    def test_rejects_degenerate(self):
        with pytest.raises(DataError):
            SynthConfig(classes=1)
        with pytest.raises(DataError):
            SynthConfig(videos_per_class=0)
        with pytest.raises(DataError):
            SynthConfig(separation=-1.0)


class TestPersistence:
    def test_round_trip_bit_exact(self, tmp_path, tiny_dataset):
        manifest = save_dataset(tiny_dataset, tmp_path / "ds")
        back = load_dataset(manifest)
        assert back.class_names == tiny_dataset.class_names
        assert back.split == tiny_dataset.split
        assert _dataset_bytes(back) == _dataset_bytes(tiny_dataset)

    def test_load_from_directory(self, tmp_path, tiny_dataset):
        save_dataset(tiny_dataset, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert len(back) == len(tiny_dataset)

    def test_split_tag_round_trips(self, tmp_path, tiny_dataset):
        train, _, _ = split_dataset(tiny_dataset, (1.0, 0.0, 0.0), seed=0)
        save_dataset(train, tmp_path / "t")
        assert load_dataset(tmp_path / "t").split == "train"

    def test_corrupt_blob_names_record(self, tmp_path, tiny_dataset):
        save_dataset(tiny_dataset, tmp_path / "ds")
        victim = tiny_dataset.records[1]
        blob = tmp_path / "ds" / "blobs" / f"{victim.id}_audio.avet"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(DataError, match=victim.id):
            load_dataset(tmp_path / "ds")

    def test_invalid_record_names_record(self, tmp_path, tiny_dataset):
        save_dataset(tiny_dataset, tmp_path / "ds")
        manifest_path = tmp_path / "ds" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["records"][0]["seg_labels"] = [0] * 10  # run fine, but label 0 with wrong video_label
        manifest["records"][0]["video_label"] = 3
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(DataError, match=manifest["records"][0]["id"]):
            load_dataset(tmp_path / "ds")

    def test_missing_manifest_key(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text(json.dumps({"records": []}))
        with pytest.raises(DataError, match="class_names"):
            load_dataset(p)

    def test_not_json(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text("{nope")
        with pytest.raises(DataError, match="JSON"):
            load_dataset(p)

    def test_inconsistent_dims(self, tmp_path):
        a = _clean_record(seed=1)
        rng = np.random.default_rng(9)
        b = VideoRecord(
            "wide",
            rng.standard_normal((10, 8)).astype(np.float32),  # different d_a
            rng.standard_normal((10, 4, 6)).astype(np.float32),
            a.seg_labels,
            a.video_label,
        )
        from avel.avedata import Dataset

        ds = Dataset(records=(a, b), class_names=("e0", "e1", "e2", "e3", "background"))
        save_dataset(ds, tmp_path / "ds")
        with pytest.raises(DataError, match="disagree"):
            load_dataset(tmp_path / "ds")

    def test_empty_dataset(self, tmp_path):
        from avel.avedata import Dataset

        ds = Dataset(records=(), class_names=("e0", "background"))
        save_dataset(ds, tmp_path / "ds")
        assert len(load_dataset(tmp_path / "ds")) == 0


class TestSplit:
    def test_documented_example(self):
        # 6 classes x 5 videos at 0.8/0.1/0.1 -> 24/3/3 with every class in train
        ds = synth_dataset(SynthConfig(classes=6, videos_per_class=5, seed=0))
        train, val, test = split_dataset(ds, (0.8, 0.1, 0.1), seed=42)
        assert (len(train), len(val), len(test)) == (24, 3, 3)
        train_classes = {r.video_label for r in train.records}
        assert train_classes == set(range(6))

    def test_all_train(self, tiny_dataset):
        train, val, test = split_dataset(tiny_dataset, (1.0, 0.0, 0.0), seed=1)
        assert len(train) == len(tiny_dataset)
        assert len(val) == len(test) == 0

    def test_partition_property(self, tiny_dataset):
        rng = np.random.default_rng(3)
        for _ in range(20):
            raw = rng.dirichlet(np.ones(3))
            fractions = tuple(float(x) for x in raw)
            parts = split_dataset(tiny_dataset, fractions, seed=int(rng.integers(1 << 30)))
            ids = sorted(r.id for p in parts for r in p.records)
            assert ids == sorted(r.id for r in tiny_dataset.records)

    def test_deterministic(self, tiny_dataset):
        a = split_dataset(tiny_dataset, (0.6, 0.2, 0.2), seed=5)
        b = split_dataset(tiny_dataset, (0.6, 0.2, 0.2), seed=5)
        for pa, pb in zip(a, b):
            assert [r.id for r in pa.records] == [r.id for r in pb.records]

    def test_split_names(self, tiny_dataset):
        parts = split_dataset(tiny_dataset, (0.5, 0.25, 0.25), seed=0)
        assert tuple(p.split for p in parts) == ("train", "val", "test")

    def test_bad_fractions(self, tiny_dataset):
        with pytest.raises(DataError, match="sum to 1"):
            split_dataset(tiny_dataset, (0.5, 0.2, 0.2), seed=0)
        with pytest.raises(DataError, match="non-negative"):
            split_dataset(tiny_dataset, (1.2, -0.1, -0.1), seed=0)
