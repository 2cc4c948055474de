import dataclasses
import json

import numpy as np
import pytest

from avel import edrnet, harness
from avel.avedata import SynthConfig, synth_dataset, split_dataset
from avel.b2ilc import PredictionSequence, correct
from avel.edrnet import EdrConfig
from avel.harness import (
    CheckpointError,
    TrainConfig,
    build_report,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    export_cams,
    predict_segments,
    run_ablation,
    train,
)
from avel.losses import LossWeights

MICRO_CFG = EdrConfig(
    k=3, layers=2, width=6, segments=10, classes=4,
    audio_dim=3, visual_dim=3, spatial_size=4, spatial_kernel=3, seed=1,
)


def micro_data(videos=2, seed=13):
    ds = synth_dataset(
        SynthConfig(classes=4, videos_per_class=videos, d_a=3, d_v=3, spatial_size=4,
                    separation=3.0, seed=seed)
    )
    return ds


class TestTrainConfig:
    def test_wsel_rejects_augmentation(self):
        with pytest.raises(ValueError, match="segment labels"):
            TrainConfig(task="WSEL", augment=True)

    def test_unknown_task(self):
        with pytest.raises(ValueError, match="task"):
            TrainConfig(task="SUPERVISED")

    def test_bad_numbers(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr_decay_factor=0.0)


class TestTrainLoop:
    def test_loss_decreases_first_steps(self):
        ds = micro_data()
        cfg = TrainConfig(task="SEL", lr=2e-3, batch_size=len(ds), epochs=5, patience=0)
        result = train(ds, ds, MICRO_CFG, cfg)
        losses = [e.train_loss for e in result.log]
        assert len(losses) == 5
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_wsel_loss_decreases(self):
        ds = micro_data()
        cfg = TrainConfig(task="WSEL", lr=2e-3, batch_size=len(ds), epochs=5, patience=0)
        result = train(ds, ds, MICRO_CFG, cfg)
        losses = [e.train_loss for e in result.log]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_zero_lr_keeps_parameters(self):
        ds = micro_data()
        cfg = TrainConfig(task="SEL", lr=0.0, batch_size=4, epochs=2)
        result = train(ds, ds, MICRO_CFG, cfg)
        init = edrnet.init_params(MICRO_CFG)
        for name in init:
            assert result.params[name].tobytes() == init[name].tobytes()

    def test_bitwise_reproducible(self):
        ds = micro_data()
        cfg = TrainConfig(task="SEL", lr=1e-3, batch_size=3, epochs=2, seed=7)
        a = train(ds, ds, MICRO_CFG, cfg)
        b = train(ds, ds, MICRO_CFG, cfg)
        assert a.best_epoch == b.best_epoch
        for name in a.params:
            assert a.params[name].tobytes() == b.params[name].tobytes()

    def test_lr_schedule_steps(self):
        ds = micro_data()
        cfg = TrainConfig(task="SEL", lr=1e-3, batch_size=8, epochs=5,
                          lr_decay_every=2, lr_decay_factor=0.5, patience=0)
        result = train(ds, ds, MICRO_CFG, cfg)
        assert [e.lr for e in result.log] == [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]

    def test_class_count_mismatch_rejected(self):
        ds = micro_data()
        bad_cfg = dataclasses.replace(MICRO_CFG, classes=7)
        with pytest.raises(ValueError, match="classes"):
            train(ds, ds, bad_cfg, TrainConfig(epochs=1))

    def test_divergence_aborts_with_diagnostics(self):
        # Adam bounds each update by roughly lr, so the step itself must
        # overflow float32 parameter storage to drive activations non-finite.
        ds = micro_data()
        cfg = TrainConfig(task="SEL", lr=1e200, batch_size=8, epochs=10, patience=0)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(RuntimeError, match="non-finite"):
                train(ds, ds, MICRO_CFG, cfg)

    def test_epoch_log_written(self, tmp_path):
        ds = micro_data()
        cfg = TrainConfig(task="SEL", lr=1e-3, batch_size=8, epochs=3, patience=0)
        train(ds, ds, MICRO_CFG, cfg, log_path=tmp_path / "log.ndjson")
        lines = (tmp_path / "log.ndjson").read_text().strip().splitlines()
        assert len(lines) == 3
        entry = json.loads(lines[0])
        assert {"epoch", "lr", "train_loss", "val_accuracy", "seconds"} <= set(entry)

    def test_best_checkpoint_retained(self):
        ds = micro_data()
        cfg = TrainConfig(task="SEL", lr=3e-3, batch_size=8, epochs=6, patience=0)
        result = train(ds, ds, MICRO_CFG, cfg)
        accs = [e.val_accuracy for e in result.log]
        assert result.best_val_accuracy == max(accs)
        assert accs[result.best_epoch] == max(accs)
        got = evaluate(ds, result.params, MICRO_CFG).segment_accuracy
        assert got == pytest.approx(result.best_val_accuracy)

    def test_augmentation_grows_training_set(self):
        ds = micro_data()
        cfg = TrainConfig(task="SEL", lr=1e-3, batch_size=64, epochs=1,
                          augment=True, augment_per_class=3, patience=0)
        result = train(ds, ds, MICRO_CFG, cfg)
        assert len(result.log) == 1  # smoke: ran with fused videos mixed in


class TestEvaluate:
    def test_report_on_ground_truth(self):
        true = np.array([0, 1, 2, 2, 3, 3])
        report = build_report(true, true.copy(), 4)
        assert report.segment_accuracy == 1.0
        assert report.per_class_accuracy == {0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0}
        assert report.n_segments == 6
        np.testing.assert_array_equal(report.confusion, np.diag([1, 1, 2, 2]))

    def test_random_predictor_near_chance(self):
        rng = np.random.default_rng(0)
        n, c = 40000, 29
        true = rng.integers(0, c, n)
        pred = rng.integers(0, c, n)
        report = build_report(true, pred, c)
        # binomial: mean 1/29, sigma ~ 0.0009; allow 5 sigma
        assert abs(report.segment_accuracy - 1 / 29) < 5 * np.sqrt((1 / 29) * (28 / 29) / n)

    def test_per_class_skips_absent_classes(self):
        report = build_report(np.array([0, 0, 2]), np.array([0, 1, 2]), 4)
        assert set(report.per_class_accuracy) == {0, 2}

    def test_empty_dataset(self):
        from avel.avedata import Dataset

        ds = Dataset(records=(), class_names=("a", "b", "c", "background"))
        report = evaluate(ds, edrnet.init_params(MICRO_CFG), MICRO_CFG)
        assert report.n_segments == 0
        assert np.isnan(report.segment_accuracy)

    def test_correction_only_touches_bags(self):
        ds = micro_data(videos=4)
        params = edrnet.init_params(MICRO_CFG)
        background = MICRO_CFG.classes - 1
        for rec in ds.records:
            probs = predict_segments(rec, params, MICRO_CFG)
            raw = np.argmax(probs, axis=1)
            fixed = correct(PredictionSequence(hard=raw), background).hard
            changed = raw != fixed
            assert np.all(raw[changed] != background)
            assert np.all(fixed[changed] != background)

    def test_source_selection(self):
        ds = micro_data()
        params = edrnet.init_params(MICRO_CFG)
        rec = ds.records[0]
        gated = predict_segments(rec, params, MICRO_CFG, "gated")
        from_a = predict_segments(rec, params, MICRO_CFG, "A")
        assert not np.allclose(gated, from_a)
        with pytest.raises(ValueError, match="source"):
            predict_segments(rec, params, MICRO_CFG, "B")

    def test_disabled_branch_source_rejected(self):
        cfg = dataclasses.replace(MICRO_CFG, branch_v=False, branch_av=False)
        ds = micro_data()
        with pytest.raises(ValueError, match="disabled"):
            predict_segments(ds.records[0], edrnet.init_params(cfg), cfg, "V")


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        params = edrnet.init_params(MICRO_CFG)
        checkpoint_save(params, MICRO_CFG, tmp_path / "ck")
        loaded, cfg = checkpoint_load(tmp_path / "ck")
        assert cfg == MICRO_CFG
        assert set(loaded) == set(params)
        for name in params:
            assert loaded[name].tobytes() == params[name].tobytes()

    def test_forward_identical_after_reload(self, tmp_path):
        ds = micro_data()
        params = edrnet.init_params(MICRO_CFG)
        checkpoint_save(params, MICRO_CFG, tmp_path / "ck")
        loaded, cfg = checkpoint_load(tmp_path / "ck")
        a = edrnet.forward(ds.records[0], MICRO_CFG, params)
        b = edrnet.forward(ds.records[0], cfg, loaded)
        assert a.seg_probs.tobytes() == b.seg_probs.tobytes()

    def test_expected_config_mismatch_names_fields(self, tmp_path):
        checkpoint_save(edrnet.init_params(MICRO_CFG), MICRO_CFG, tmp_path / "ck")
        other = dataclasses.replace(MICRO_CFG, width=12, classes=5)
        with pytest.raises(CheckpointError, match="width"):
            checkpoint_load(tmp_path / "ck", expected=other)

    def test_corrupt_index(self, tmp_path):
        checkpoint_save(edrnet.init_params(MICRO_CFG), MICRO_CFG, tmp_path / "ck")
        (tmp_path / "ck" / "index.json").write_text("{broken")
        with pytest.raises(CheckpointError, match="corrupt"):
            checkpoint_load(tmp_path / "ck")

    def test_missing_index(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot read"):
            checkpoint_load(tmp_path / "nowhere")

    def test_corrupt_blob_names_parameter(self, tmp_path):
        checkpoint_save(edrnet.init_params(MICRO_CFG), MICRO_CFG, tmp_path / "ck")
        victim = tmp_path / "ck" / "head.w.avet"
        victim.write_bytes(victim.read_bytes()[:-4])
        with pytest.raises(CheckpointError, match="head.w"):
            checkpoint_load(tmp_path / "ck")

    def test_wrong_shape_rejected(self, tmp_path):
        from avel.avedata import write_blob

        checkpoint_save(edrnet.init_params(MICRO_CFG), MICRO_CFG, tmp_path / "ck")
        write_blob(tmp_path / "ck" / "head.b.avet", np.zeros(7, np.float32))
        with pytest.raises(CheckpointError, match="head.b"):
            checkpoint_load(tmp_path / "ck")

    def test_missing_parameter_listed(self, tmp_path):
        checkpoint_save(edrnet.init_params(MICRO_CFG), MICRO_CFG, tmp_path / "ck")
        index = json.loads((tmp_path / "ck" / "index.json").read_text())
        del index["params"]["gate.w"]
        (tmp_path / "ck" / "index.json").write_text(json.dumps(index))
        with pytest.raises(CheckpointError, match="gate.w"):
            checkpoint_load(tmp_path / "ck")


class TestExportCams:
    def test_file_count_and_names(self, tmp_path):
        ds = micro_data()
        params = edrnet.init_params(MICRO_CFG)
        written = export_cams(ds.records[:2], params, MICRO_CFG, tmp_path)
        windows = MICRO_CFG.segments - MICRO_CFG.k + 1
        assert len(written) == 2 * 2 * windows  # two records, V and AV sources
        rec = ds.records[0]
        for t in range(windows):
            assert (tmp_path / f"{rec.id}_V_{t}.pgm").exists()
            assert (tmp_path / f"{rec.id}_AV_{t}.pgm").exists()

    def test_pgm_format(self, tmp_path):
        ds = micro_data()
        params = edrnet.init_params(MICRO_CFG)
        written = export_cams(ds.records[:1], params, MICRO_CFG, tmp_path)
        data = written[0].read_bytes()
        header = f"P5\n{MICRO_CFG.side} {MICRO_CFG.side}\n255\n".encode()
        assert data.startswith(header)
        assert len(data) == len(header) + MICRO_CFG.spatial_size

    def test_audio_only_model_exports_nothing(self, tmp_path):
        cfg = dataclasses.replace(MICRO_CFG, branch_v=False, branch_av=False)
        ds = micro_data()
        assert export_cams(ds.records[:1], edrnet.init_params(cfg), cfg, tmp_path) == []


def _fast_train_cfg(**over):
    base = dict(task="SEL", lr=1e-3, batch_size=8, epochs=1, patience=0)
    base.update(over)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    ds = micro_data(videos=3)
    return split_dataset(ds, (0.5, 0.25, 0.25), seed=0)


class TestAblation:
    def test_kernel_suite_pairs_depth(self, data):
        rows = run_ablation("kernel", data, MICRO_CFG, _fast_train_cfg())
        assert [(r.model_cfg.k, r.model_cfg.layers) for r in rows] == [
            (2, 9), (3, 4), (4, 3), (5, 2),
        ]
        for row in rows:
            diff = {
                f.name
                for f in dataclasses.fields(EdrConfig)
                if getattr(row.model_cfg, f.name) != getattr(MICRO_CFG, f.name)
            }
            assert diff <= {"k", "layers"}

    def test_depth_suite(self, data):
        rows = run_ablation("depth", data, MICRO_CFG, _fast_train_cfg())
        assert [r.model_cfg.layers for r in rows] == [1, 2, 3, 4]

    def test_width_suite(self, data):
        rows = run_ablation("width", data, MICRO_CFG, _fast_train_cfg(), widths=(4, 6))
        assert [r.model_cfg.width for r in rows] == [4, 6]
        for row in rows:
            diff = {
                f.name
                for f in dataclasses.fields(EdrConfig)
                if getattr(row.model_cfg, f.name) != getattr(MICRO_CFG, f.name)
            }
            assert diff <= {"width"}

    def test_branches_suite_reports_expected_sources(self, data):
        rows = run_ablation("branches", data, MICRO_CFG, _fast_train_cfg())
        by_name = {r.name: r for r in rows}
        assert set(by_name) == {"A-only", "V-only", "A+AV", "V+AV", "A+V", "A+V+AV"}
        assert set(by_name["A-only"].reports) == {"A"}
        assert set(by_name["V+AV"].reports) == {"V"}
        assert set(by_name["A+V"].reports) == {"A", "V", "gated"}
        assert set(by_name["A+V+AV"].reports) == {"A", "V", "gated"}

    def test_positional_suite(self, data):
        rows = run_ablation("positional", data, MICRO_CFG, _fast_train_cfg())
        assert [r.model_cfg.positional for r in rows] == [True, False]

    def test_components_suite_sel(self, data):
        rows = run_ablation("components", data, MICRO_CFG,
                            _fast_train_cfg(augment_per_class=2))
        names = [r.name for r in rows]
        assert names == ["base", "+correction", "+patch-contrast", "+fusion"]
        assert rows[0].train_cfg.loss.lambda2 == 0.0
        assert not rows[0].train_cfg.b2ilc
        assert rows[1].train_cfg.b2ilc
        assert rows[2].train_cfg.loss.lambda2 > 0.0
        assert rows[3].train_cfg.augment

    def test_components_suite_wsel(self, data):
        rows = run_ablation(
            "components", data, MICRO_CFG,
            _fast_train_cfg(task="WSEL", augment=False),
        )
        assert [r.name for r in rows] == ["base", "+correction"]

    def test_augmentation_suite(self, data):
        rows = run_ablation(
            "augmentation", data, MICRO_CFG, _fast_train_cfg(), sample_counts=(1, 2)
        )
        assert [r.train_cfg.augment_per_class for r in rows] == [1, 2]
        assert all(r.train_cfg.augment for r in rows)

    def test_unknown_suite(self, data):
        with pytest.raises(ValueError, match="suite"):
            run_ablation("everything", data, MICRO_CFG, _fast_train_cfg())
