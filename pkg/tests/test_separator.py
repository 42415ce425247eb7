import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deq_unmix.data import make_scene_set
from deq_unmix.estimator import SeparatorEstimator
from deq_unmix.layers import Linear, blstm_macs
from deq_unmix.separator import (
    VARIANTS,
    Checkpoint,
    CheckpointError,
    CheckpointMismatch,
    EpochLog,
    ModelSpec,
    SeparatorModel,
    TrainConfig,
    TrainingAborted,
    _Progress,
    count_macs,
    count_params,
    crop_bins,
    core_macs,
    per_iteration_core_macs,
    train,
    update_schedule,
)
from deq_unmix.solvers import SolverConfig
from deq_unmix.tensor import ShapeError

PUBLISHED_PARAMS_M = {"umx": 35.55, "umx_large4": 41.85, "umx_large5": 48.16, "umx_small": 25.15,
                  "wt_umx": 25.06, "deq_umx": 25.06}


@pytest.fixture(scope="module")
def tiny_data():
    spec = ModelSpec.toy("deq_umx", hidden=8)
    scenes = make_scene_set(6, spec, 0.25, seed=5)
    return scenes.magnitudes("tonal")


def tiny_config(**kw):
    base = dict(segment_seconds=0.15, pretrain_epochs=2, epochs=2, batch_size=3, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestModelSpec:
    def test_full_scale_constants(self):
        spec = ModelSpec.full_scale("umx")
        assert (spec.bins_total, spec.bins_cropped, spec.channels, spec.hidden) == (2049, 1487, 2, 512)
        assert ModelSpec.full_scale("umx_small").hidden == 410

    def test_crop(self):
        assert crop_bins(44100, 4096, 16000) == 1487
        assert crop_bins(8000, 128, 4000) == 65

    @pytest.mark.parametrize("variant, kwargs", [
        ("umx", {"unroll_l": 4}),
        ("wt_umx", {}),
        ("deq_umx", {"unroll_l": 4}),
        ("umx", {"solver_config": SolverConfig()}),
        ("deq_umx", {"solver_config": SolverConfig()}),
    ])
    def test_variant_fields_exactly_when_applicable(self, variant, kwargs):
        fields = dict(bins_total=65, bins_cropped=65, channels=1, hidden=8, targets=("a",), sample_rate=8000,
                      frame_len=128, hop=32)
        with pytest.raises(ValueError):
            ModelSpec(variant=variant, **fields, **kwargs)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ModelSpec.toy("umx", bins_cropped=70)
        with pytest.raises(ValueError):
            ModelSpec.toy("transformer")

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_dict_round_trip(self, variant):
        spec = ModelSpec.toy(variant)
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestParamCount:
    def test_single_fc(self):
        assert Linear(13, 7).parameters().total_count() == 13 * 7 + 7

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_closed_form_matches_instantiated_toy(self, variant):
        count_params(ModelSpec.toy(variant, hidden=12, bins_cropped=40), instantiate=True)

    def test_closed_form_matches_instantiated_full_scale(self):
        count_params(ModelSpec.full_scale("deq_umx"), instantiate=True)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_published_totals(self, variant):
        total = count_params(ModelSpec.full_scale(variant)).total / 1e6
        assert abs(total / PUBLISHED_PARAMS_M[variant] - 1) <= 0.10

    def test_reduction_ratio(self):
        umx = count_params(ModelSpec.full_scale("umx")).total
        deq = count_params(ModelSpec.full_scale("deq_umx")).total
        assert 0.25 <= (umx - deq) / umx <= 0.35

    def test_totals_sum_over_targets(self):
        c = count_params(ModelSpec.full_scale("umx"))
        assert c.total == 4 * c.per_target


class TestMacCount:
    def test_fc_only_intercept(self):
        spec = ModelSpec.toy("wt_umx", hidden=8, bins_cropped=30, targets=("a",))
        T = 1 + int(round(2.0 * spec.sample_rate)) // spec.hop
        expected = T * (1 * 30 * 8 + 16 * 8 + 8 * 1 * 65)
        assert count_macs(spec, 2.0, iterations=0).total == expected

    @pytest.mark.parametrize("L, delta", [(4, 2), (0, 6), (1, 19)])
    def test_affine_in_iterations(self, L, delta):
        spec = ModelSpec.full_scale("wt_umx")
        lhs = count_macs(spec, 6.0, L + delta).total - count_macs(spec, 6.0, L).total
        assert lhs == delta * per_iteration_core_macs(spec, 6.0).total

    def test_core_cost(self):
        assert core_macs(512) == 2 * 512 * 512 + blstm_macs(512, 256)

    def test_deq_to_umx_ratio(self):
        ratio = count_macs(ModelSpec.full_scale("deq_umx"), 6).total / count_macs(ModelSpec.full_scale("umx"), 6).total
        assert abs(ratio / (18.74 / 9.08) - 1) <= 0.15

    def test_umx_has_no_iterations(self):
        with pytest.raises(ValueError):
            count_macs(ModelSpec.full_scale("umx"), 6, iterations=2)


class TestForward:
    @pytest.mark.parametrize("variant", ["umx", "wt_umx", "deq_umx"])
    def test_identity_mask(self, variant):
        model = SeparatorModel(ModelSpec.toy(variant, hidden=8, bins_cropped=40), np.random.default_rng(0))
        model.set_identity_mask()
        x = np.abs(np.random.default_rng(1).standard_normal((2, 1, 7, 65)))
        np.testing.assert_array_equal(model(x).data, x)

    def test_zero_in_zero_out(self):
        model = SeparatorModel(ModelSpec.toy("deq_umx", hidden=8), np.random.default_rng(0))
        np.testing.assert_array_equal(model.separate(np.zeros((1, 9, 65))), 0.0)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["umx", "wt_umx", "deq_umx"]))
    def test_mask_nonnegative(self, seed, variant):
        rng = np.random.default_rng(seed)
        model = SeparatorModel(ModelSpec.toy(variant, hidden=6, channels=2), rng)
        x = np.abs(rng.standard_normal((2, 2, 5, 65))) * rng.uniform(0, 10)
        assert np.all(model.mask(x).data >= 0)
        assert np.all(model(x).data >= 0)

    def test_shape_and_sign_checks(self):
        model = SeparatorModel(ModelSpec.toy("umx", hidden=6))
        with pytest.raises(ShapeError):
            model(np.zeros((1, 2, 5, 65)))
        with pytest.raises(ShapeError):
            model(np.zeros((1, 1, 5, 64)))
        with pytest.raises(ValueError):
            model(-np.ones((1, 1, 5, 65)))

    def test_unbatched_input(self):
        model = SeparatorModel(ModelSpec.toy("umx", hidden=6))
        x = np.ones((1, 5, 65))
        assert model.separate(x).shape == x.shape

    def test_deq_trace_reaches_budget(self):
        model = SeparatorModel(ModelSpec.toy("deq_umx", hidden=8, l_max=6, epsilon=1e-12), np.random.default_rng(2))
        model.separate(np.abs(np.random.default_rng(3).standard_normal((1, 1, 9, 65))))
        assert model.last_nfe == 6


class TestTraining:
    def test_stage_switch_is_bit_exact(self, tiny_data):
        spec = ModelSpec.toy("deq_umx", hidden=8)
        model = SeparatorModel(spec, np.random.default_rng(0))
        cfg = tiny_config(epochs=0)
        train(model, tiny_data, tiny_data, cfg)
        x = tiny_data.mixtures[:2]
        model.set_weight_tied(cfg.pretrain_unroll_l)
        wt = model.separate(x)
        model.set_plain_probe(cfg.pretrain_unroll_l)
        probe = model.separate(x)
        assert model.last_nfe == cfg.pretrain_unroll_l
        assert np.array_equal(wt, probe)

    def test_schedule_shape(self, tiny_data):
        model = SeparatorModel(ModelSpec.toy("deq_umx", hidden=8), np.random.default_rng(0))
        result = train(model, tiny_data, tiny_data, tiny_config())
        assert [e.stage for e in result.history] == ["pretrain_wt"] * 2 + ["deq"] * 2
        assert [e.nfe_mean for e in result.history] == [4.0, 4.0, 6.0, 6.0]

    def test_zero_pretrain_epochs_skip_stage(self, tiny_data):
        model = SeparatorModel(ModelSpec.toy("deq_umx", hidden=8), np.random.default_rng(0))
        result = train(model, tiny_data, tiny_data, tiny_config(pretrain_epochs=0))
        assert {e.stage for e in result.history} == {"deq"}

    @pytest.mark.parametrize("variant, nfe", [("umx", 0.0), ("wt_umx", 4.0)])
    def test_other_variants_train(self, tiny_data, variant, nfe):
        model = SeparatorModel(ModelSpec.toy(variant, hidden=8), np.random.default_rng(0))
        result = train(model, tiny_data, tiny_data, tiny_config(epochs=3))
        assert [(e.stage, e.nfe_mean) for e in result.history] == [("train", nfe)] * 3
        assert all(math.isfinite(e.train_loss) for e in result.history)

    def test_deterministic_and_resumable(self, tiny_data, tmp_path):
        spec = ModelSpec.toy("deq_umx", hidden=8)
        cfg = tiny_config(pretrain_epochs=2, epochs=2)
        full = train(SeparatorModel(spec, np.random.default_rng(0)), tiny_data, tiny_data, cfg)
        again = train(SeparatorModel(spec, np.random.default_rng(0)), tiny_data, tiny_data, cfg)
        assert [e.line() for e in full.history] == [e.line() for e in again.history]

        first = train(SeparatorModel(spec, np.random.default_rng(0)), tiny_data, tiny_data, cfg, max_epochs=2)
        first.checkpoint.save(tmp_path / "a.ckpt")
        resumed = train(SeparatorModel(spec), tiny_data, tiny_data, cfg, resume=Checkpoint.load(tmp_path / "a.ckpt"))
        combined = first.history + resumed.history
        assert [(e.train_loss, e.val_loss) for e in combined] == [(e.train_loss, e.val_loss) for e in full.history]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_aborts_with_checkpoint(self, tiny_data):
        model = SeparatorModel(ModelSpec.toy("deq_umx", hidden=8), np.random.default_rng(0))
        with pytest.raises(TrainingAborted) as info:
            train(model, tiny_data, tiny_data, tiny_config(lr=1e300))
        assert info.value.checkpoint.meta["epoch"] == 0

    def test_plateau_and_early_stop(self):
        cfg = TrainConfig(plateau_patience_epochs=2, lr_decay_factor=0.3, lr=1.0)
        p = _Progress(lr=1.0)
        for val in [1.0, 2.0, 2.0, 2.0]:
            update_schedule(p, val, cfg)
        assert p.lr == pytest.approx(0.3) and p.plateau_bad == 0 and p.stop_bad == 3
        update_schedule(p, 0.5, cfg)
        assert p.best_val == 0.5 and p.stop_bad == 0

    def test_log_line_round_trip(self):
        e = EpochLog(3, "deq", 0.125, 0.25, 1e-3, 6.0)
        assert EpochLog.parse(e.line()) == e
        assert e.line().count(",") == 5

    @pytest.mark.parametrize("kwargs", [{"lr": 0}, {"pretrain_epochs": -1}, {"lr_decay_factor": 1.5},
                                        {"backward_mode": "exact"}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestCheckpoint:
    def make(self, tiny_data):
        model = SeparatorModel(ModelSpec.toy("deq_umx", hidden=8), np.random.default_rng(0))
        return train(model, tiny_data, tiny_data, tiny_config(pretrain_epochs=1, epochs=1)).checkpoint

    def test_byte_identical_round_trip(self, tiny_data, tmp_path):
        ck = self.make(tiny_data)
        ck.save(tmp_path / "a.ckpt")
        Checkpoint.load(tmp_path / "a.ckpt").save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_model_round_trip(self, tiny_data):
        ck = self.make(tiny_data)
        model = Checkpoint.from_bytes(ck.to_bytes()).build_model()
        x = tiny_data.mixtures[:1]
        original = SeparatorModel(ck.spec)
        original.load_state_arrays(ck.arrays)
        assert np.array_equal(model.separate(x), original.separate(x))

    def test_unsupported_version(self, tiny_data):
        raw = bytearray(self.make(tiny_data).to_bytes())
        raw[8] = 255
        with pytest.raises(CheckpointError, match="version 255"):
            Checkpoint.from_bytes(bytes(raw))

    def test_truncated_payload_reports_offset(self, tiny_data):
        raw = self.make(tiny_data).to_bytes()
        with pytest.raises(CheckpointError) as info:
            Checkpoint.from_bytes(raw[:-3])
        assert 0 < info.value.offset < len(raw)

    @pytest.mark.parametrize("cut, offset", [(lambda r: b"XXXXXXXX" + r[8:], 0), (lambda r: r[:10], 10),
                                             (lambda r: r[:20], 13)])
    def test_corrupt_header(self, tiny_data, cut, offset):
        with pytest.raises(CheckpointError) as info:
            Checkpoint.from_bytes(cut(self.make(tiny_data).to_bytes()))
        assert info.value.offset == offset

    def test_state_mismatch(self, tiny_data):
        ck = self.make(tiny_data)
        other = SeparatorModel(ModelSpec.toy("deq_umx", hidden=10))
        with pytest.raises(CheckpointMismatch):
            other.load_state_arrays(ck.arrays)


class TestEstimator:
    def test_fit_predict_score(self, tiny_data):
        est = SeparatorEstimator(hidden=8, pretrain_epochs=1, epochs=2, batch_size=2)
        est.fit(tiny_data.mixtures, tiny_data.targets)
        pred = est.predict(tiny_data.mixtures)
        assert pred.shape == tiny_data.mixtures.shape and np.all(pred >= 0)
        assert math.isfinite(est.score(tiny_data.mixtures, tiny_data.targets))
        assert len(est.history_) == 3

    def test_params_and_clone(self):
        from sklearn.base import clone

        est = SeparatorEstimator(variant="wt_umx", unroll_l=3)
        assert clone(est).get_params()["unroll_l"] == 3

    def test_validation(self, tiny_data):
        from sklearn.exceptions import NotFittedError

        est = SeparatorEstimator()
        with pytest.raises(NotFittedError):
            est.predict(tiny_data.mixtures)
        with pytest.raises(ValueError):
            est.fit(-tiny_data.mixtures - 1, tiny_data.targets)
        with pytest.raises(ValueError):
            est.fit(tiny_data.mixtures[:, 0], tiny_data.targets[:, 0])
