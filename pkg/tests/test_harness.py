import json

import numpy as np
import pytest

from tversky3d import data, harness, metrics, unet
from tversky3d.errors import ConfigError, TrainingError
from tversky3d.nn import ConvKernel
from tversky3d.optim import AdamState, adam_step, adam_update

TINY_SYNTH = data.SynthConfig(volume_shape=(8, 8, 8), foreground_fraction_target=0.02,
                              lesion_count_range=(1, 2), lesion_radius_range=(1.0, 1.5))
TINY_NET = unet.NetConfig((8, 8, 8), in_channels=3, levels=1, base_features=2)


def tiny_config(**kw):
    base = dict(epochs=3, net=TINY_NET, synth=TINY_SYNTH, n_subjects=4, seeds=(1,), base_lr=1e-2)
    return harness.TrainConfig(**{**base, **kw})


def tiny_subjects(n=4, seed=0):
    return data.generate_subjects(data.SynthConfig(**{**TINY_SYNTH.to_dict(), "seed": seed}), n)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        theta = np.array([1.0, -2.0])
        m, v = np.zeros(2), np.zeros(2)
        adam_update(theta, np.zeros(2), m, v, t=1, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        np.testing.assert_array_equal(theta, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        theta = np.zeros(1)
        adam_update(theta, np.ones(1), np.zeros(1), np.zeros(1), t=1, lr=0.1,
                    beta1=0.9, beta2=0.999, eps=1e-8)
        assert theta[0] == pytest.approx(-0.1, rel=1e-6)

    def test_decay_schedule(self):
        s = AdamState(base_lr=1e-4)
        assert s.lr_at(0) == s.lr_at(999) == 1e-4
        assert s.lr_at(1000) == pytest.approx(0.9e-4)
        assert s.lr_at(2500) == pytest.approx(0.81e-4)

    def test_step_bumps_version_and_counter(self):
        params = unet.init_params(TINY_NET)
        grads = {n: ConvKernel(np.zeros_like(k.weights), np.zeros_like(k.bias)) for n, k in params.kernels.items()}
        state = AdamState()
        before = params.flat().copy()
        adam_step(params, grads, state)
        assert state.t == 1 and params.version == 1
        np.testing.assert_array_equal(params.flat(), before)

    def test_key_mismatch(self):
        params = unet.init_params(TINY_NET)
        with pytest.raises(ConfigError):
            adam_step(params, {}, AdamState())


class TestTrainConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = tiny_config().with_tversky(0.3, 0.7)
        path = tmp_path / "train.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert harness.TrainConfig.from_json(path) == cfg

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError, match="channels"):
            tiny_config(net=unet.NetConfig((8, 8, 8), in_channels=2, levels=1))

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            harness.TrainConfig.from_dict({"epochs": 2, "learning_rate": 1})

    def test_seeds_are_independent_streams(self):
        tags = [harness.derive_seed(1, t) for t in ("data", "init", "split", "shuffle")]
        assert len(set(tags)) == 4
        assert harness.derive_seed(1, "data") != harness.derive_seed(2, "data")


class TestTrainFold:
    def test_zero_lr_keeps_init(self):
        cfg = tiny_config(base_lr=0.0)
        res = harness.train_fold(tiny_subjects(2), cfg, TINY_NET)
        np.testing.assert_array_equal(res.params.flat(), unet.init_params(TINY_NET).flat())

    def test_deterministic(self):
        cfg = tiny_config()
        a = harness.train_fold(tiny_subjects(2), cfg, TINY_NET, shuffle_seed=4)
        b = harness.train_fold(tiny_subjects(2), cfg, TINY_NET, shuffle_seed=4)
        assert a.params.flat().tobytes() == b.params.flat().tobytes()
        assert a.losses == b.losses

    def test_loss_decreases(self):
        cfg = tiny_config(epochs=150, base_lr=1e-3)
        res = harness.train_fold(tiny_subjects(2), cfg, TINY_NET)
        assert res.losses[-1] < res.losses[0]

    def test_augmentation_keeps_voxels_paired_with_labels(self):
        vol = tiny_subjects(1)[0]
        rng = np.random.default_rng(3)
        for _ in range(5):
            aug = harness.augmented(vol, rng)
            before = sorted(map(tuple, np.c_[vol.labels.reshape(-1, 1), vol.image.reshape(-1, 3)]))
            after = sorted(map(tuple, np.c_[aug.labels.reshape(-1, 1), aug.image.reshape(-1, 3)]))
            assert before == after

    def test_augmentation_changes_what_training_sees(self):
        cfg = tiny_config(augment=False)
        a = harness.train_fold(tiny_subjects(2), cfg, TINY_NET, shuffle_seed=1)
        b = harness.train_fold(tiny_subjects(2), tiny_config(), TINY_NET, shuffle_seed=1)
        assert a.losses[0] != b.losses[0] or a.losses[1:] != b.losses[1:]

    def test_empty_training_set(self):
        with pytest.raises(ConfigError):
            harness.train_fold([], tiny_config())

    def test_nan_input_raises(self):
        vol = tiny_subjects(1)[0]
        bad = data.LabeledVolume(np.full_like(vol.image, np.nan), vol.labels, "bad")
        with pytest.raises((TrainingError, ValueError)):
            harness.train_fold([bad], tiny_config())


class TestEvaluate:
    def test_oracle_predictor_is_perfect(self):
        subjects = tiny_subjects(3)
        oracle = {id(s.image): s.labels.astype(float) for s in subjects}
        rows = harness.evaluate_fold(None, subjects, predictor=lambda img: oracle[id(img)])
        avg = harness.macro_average(rows)
        assert all(avg[m] == 1.0 for m in harness.METRIC_NAMES)

    def test_constant_half_marks_everything(self):
        rows = harness.evaluate_fold(None, tiny_subjects(2),
                                     predictor=lambda img: np.full(img.shape[:3], 0.5))
        for r in rows:
            assert r.sensitivity == 1.0 and r.specificity == 0.0
            assert r.apr == pytest.approx(r.counts.tp / (r.counts.tp + r.counts.fp))

    def test_curve_consistent_with_threshold(self):
        vol = tiny_subjects(1)[0]
        p0 = np.random.default_rng(0).random(vol.labels.shape)
        r = harness.score_subject(p0, vol, 0.5)
        # the lowest curve threshold >= 0.5 reproduces the thresholded counts
        k = np.flatnonzero(r.curve.thresholds >= 0.5)[-1]
        assert r.curve.recall[k] == pytest.approx(r.sensitivity)
        assert r.curve.precision[k] == pytest.approx(metrics.precision(r.counts))

    def test_saved_pr_csv_reproduces_row(self, tmp_path):
        vol = tiny_subjects(1)[0]
        p0 = np.round(np.random.default_rng(1).random(vol.labels.shape), 3)
        r = harness.score_subject(p0, vol, 0.5)
        metrics.write_pr_csv(tmp_path / "pr.csv", r.curve)
        back = metrics.read_pr_csv(tmp_path / "pr.csv")
        k = np.flatnonzero(back.thresholds >= 0.5)[-1]
        assert back.recall[k] == pytest.approx(r.sensitivity, abs=1e-6)
        assert back.precision[k] == pytest.approx(metrics.precision(r.counts), abs=1e-6)
        assert back.apr == pytest.approx(r.apr, abs=1e-5)

    def test_micro_uses_pooled_counts(self):
        rows = harness.evaluate_fold(None, tiny_subjects(3),
                                     predictor=lambda img: (img[..., 0] > 0.8).astype(float))
        total = sum((r.counts for r in rows[1:]), rows[0].counts)
        assert harness.micro_average(rows)["dsc"] == metrics.dsc(total)


class TestSweep:
    def test_single_pair_single_seed(self, tmp_path):
        cfg = tiny_config(epochs=2)
        report = harness.run_sweep(cfg, pairs=[(0.3, 0.7)], out_dir=tmp_path)
        assert len(report.rows) == 1
        row = report.rows[0]
        assert sorted(row.per_seed) == [1]
        assert len(row.subjects[1]) == cfg.n_subjects
        for name in ("table.csv", "table.md", "report.json", "pr_0.3_0.7.csv", "pr.svg",
                     "ckpt/net_0.3_0.7_s1_a.tvnet", "ckpt/net_0.3_0.7_s1_b.tvnet"):
            assert (tmp_path / name).exists(), name
        assert (tmp_path / "table.csv").read_text().startswith("alpha,beta,dsc,sensitivity")

    def test_subject_dsc_is_harmonic_mean(self):
        report = harness.run_sweep(tiny_config(epochs=2), pairs=[(0.5, 0.5)])
        for r in report.rows[0].subjects[1]:
            p, s = metrics.precision(r.counts), r.sensitivity
            if p + s > 0:
                assert r.dsc == pytest.approx(2 * p * s / (p + s), rel=1e-12)

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = tiny_config(epochs=2)
        harness.run_sweep(cfg, pairs=[(0.5, 0.5), (0.2, 0.8)], out_dir=tmp_path / "a")
        harness.run_sweep(cfg, pairs=[(0.5, 0.5), (0.2, 0.8)], out_dir=tmp_path / "b")
        for name in ("table.csv", "report.json", "ckpt/net_0.2_0.8_s1_b.tvnet"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_pairs_share_initialisation(self):
        report = harness.run_sweep(tiny_config(base_lr=0.0, epochs=1),
                                   pairs=[(0.5, 0.5), (0.1, 0.9)], keep_models=True)
        a = report.models[(0.5, 0.5, 1, "a")].flat()
        b = report.models[(0.1, 0.9, 1, "a")].flat()
        assert a.tobytes() == b.tobytes()

    def test_empty_pairs(self):
        with pytest.raises(ConfigError):
            harness.run_sweep(tiny_config(), pairs=[], seeds=[])
