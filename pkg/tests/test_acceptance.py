"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict (printed in the terminal summary)
before asserting, so a red criterion still shows its measured value.
"""

import io
import time
from contextlib import redirect_stdout

import numpy as np
import pytest
from helpers import report

from deq_unmix import gradcheck
from deq_unmix.cli import main
from deq_unmix.data import make_scene_set
from deq_unmix.deq import DeqLayer
from deq_unmix.dsp import istft, masked_estimates, mwf, sdr, stft
from deq_unmix.separator import (
    ModelSpec,
    SeparatorModel,
    TrainConfig,
    count_macs,
    count_params,
    mse_loss,
    per_iteration_core_macs,
    train,
)
from deq_unmix.solvers import SolverConfig, broyden_solve
from deq_unmix.tensor import Tape, Tensor

PUBLISHED_PARAMS_M = {"umx": 35.55, "umx_large4": 41.85, "umx_large5": 48.16, "umx_small": 25.15,
                      "wt_umx": 25.06, "deq_umx": 25.06}
PUBLISHED_MAC_RATIO = 18.74 / 9.08


def test_ac01_parameter_accounting():
    start = time.perf_counter()
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main(["count", "--table1"])
    elapsed = time.perf_counter() - start
    lines = [l.split("\t") for l in buf.getvalue().splitlines() if not l.startswith("#")]
    header, body = lines[0], lines[1:]
    got = {r[0]: float(dict(zip(header, r))["params_total_M"]) for r in body}
    devs = {v: got[v] / PUBLISHED_PARAMS_M[v] - 1 for v in PUBLISHED_PARAMS_M}
    umx = count_params(ModelSpec.full_scale("umx")).total
    deq = count_params(ModelSpec.full_scale("deq_umx")).total
    reduction = (umx - deq) / umx
    worst = max(devs, key=lambda v: abs(devs[v]))
    passed = (code == 0 and set(got) == set(PUBLISHED_PARAMS_M) and all(abs(d) <= 0.10 for d in devs.values())
              and 0.25 <= reduction <= 0.35 and elapsed < 1.0)
    report(1, "parameter accounting", passed,
           f"worst deviation {100 * devs[worst]:+.2f}% ({worst}); reduction {100 * reduction:.2f}%; {elapsed:.2f}s")
    assert passed


def test_ac02_mac_accounting():
    start = time.perf_counter()
    umx, deq = ModelSpec.full_scale("umx"), ModelSpec.full_scale("deq_umx")
    ratio = count_macs(deq, 6.0).total / count_macs(umx, 6.0).total
    core = per_iteration_core_macs(deq, 6.0).total
    affine = all(
        count_macs(deq, 6.0, L + d).total - count_macs(deq, 6.0, L).total == d * core
        for L in range(0, 9) for d in range(0, 9)
    )
    elapsed = time.perf_counter() - start
    dev = ratio / PUBLISHED_MAC_RATIO - 1
    passed = abs(dev) <= 0.15 and affine and elapsed < 1.0
    report(2, "MAC accounting", passed,
           f"deq/umx = {ratio:.3f} vs {PUBLISHED_MAC_RATIO:.3f} ({100 * dev:+.2f}%); affine identity {affine}; "
           f"{elapsed:.2f}s")
    assert passed


def test_ac03_equilibrium_matches_long_unroll():
    start = time.perf_counter()
    misses, worst = 0, 0.0
    for inst in gradcheck.random_instances(100, seed=103):
        core, x, _ = inst.build()
        z = DeqLayer(core, SolverConfig(epsilon=1e-10, l_max=100))(x).z_star.data
        diff = float(np.max(np.abs(z - gradcheck.long_unroll(core, x, 1000))))
        worst = max(worst, diff)
        misses += diff >= 1e-6
    elapsed = time.perf_counter() - start
    passed = misses == 0 and elapsed < 120
    report(3, "equilibrium oracle", passed, f"{100 - misses}/100 within 1e-6 (worst {worst:.2e}); {elapsed:.1f}s")
    assert passed


def _scalar_closed_form_error() -> float:
    """d z*/d w for z* = tanh(w z* + x0), against z s' / (1 - w s')."""
    from deq_unmix.layers import Module

    class ScalarCore(Module):
        def __init__(self, w):
            self.w = Tensor([w], requires_grad=True)

        def __call__(self, z, x):
            return (self.w * z + x).tanh()

    worst = 0.0
    for w, x0 in [(0.5, 0.3), (-0.8, 1.2), (0.9, -0.4)]:
        core = ScalarCore(w)
        tight = SolverConfig(epsilon=1e-14, l_max=200)
        layer = DeqLayer(core, tight, backward_mode="implicit", backward_config=tight)
        with Tape() as tape:
            tape.backward(layer(Tensor([[x0]])).z_star.sum())
        z = 0.0
        for _ in range(2000):
            z = np.tanh(w * z + x0)
        s = 1.0 - np.tanh(w * z + x0) ** 2
        expected = z * s / (1.0 - w * s)
        worst = max(worst, abs(core.w.grad.data[0] - expected) / abs(expected))
    return worst


def test_ac04_implicit_gradients():
    start = time.perf_counter()
    suite = gradcheck.check_implicit_fd(n=50, seed=104, tol=1e-5)
    scalar = _scalar_closed_form_error()
    elapsed = time.perf_counter() - start
    passed = suite.passed and scalar < 1e-5 and elapsed < 120
    report(4, "implicit gradient", passed, f"{suite.detail}; scalar closed form rel. err {scalar:.2e}; {elapsed:.1f}s")
    assert passed, suite.worst_instance


def test_ac05_jfb_descent():
    start = time.perf_counter()
    suite = gradcheck.check_jfb_descent(n=200, seed=105, min_fraction=0.95)
    elapsed = time.perf_counter() - start
    passed = suite.passed and elapsed < 120
    report(5, "JFB descent", passed, f"{suite.detail}; {elapsed:.1f}s")
    assert passed


def test_ac06_broyden_affine_systems():
    # residual maps of contractions z -> W z + c with ||W||_2 = 0.5, the class a DEQ layer solves
    start = time.perf_counter()
    rng = np.random.default_rng(106)
    hits, step_hits, misses_at_bound = 0, 0, 0
    for _ in range(100):
        n = int(rng.integers(1, 33))
        W = rng.standard_normal((n, n))
        W *= 0.5 / np.linalg.norm(W, 2)
        c = rng.standard_normal(n)
        # one spare evaluation beyond 2n: the initial residual plus 2n Broyden steps
        _, trace = broyden_solve(lambda z: W @ z + c - z, np.zeros(n), SolverConfig(epsilon=1e-9, l_max=2 * n + 1))
        within = trace.converged and trace.l_stop <= 2 * n
        hits += within
        step_hits += trace.converged
        misses_at_bound += trace.converged and not within
    elapsed = time.perf_counter() - start
    passed = hits >= 99 and elapsed < 60
    report(6, "Broyden solver", passed,
           f"{hits}/100 below 1e-9 within 2n evaluations (initial residual counted); {step_hits}/100 within 2n "
           f"steps, {misses_at_bound} of the misses converge at exactly evaluation 2n+1; {elapsed:.2f}s")
    assert passed


def test_ac07_dsp_invariants():
    rng = np.random.default_rng(107)
    wave = rng.standard_normal((2, 44100))
    back = istft(stft(wave, 4096, 1024))
    rt = float(np.linalg.norm(back - wave) / np.linalg.norm(wave))
    mix = stft(rng.standard_normal((2, 8000)), 512, 128)
    mags = [np.abs(rng.standard_normal(mix.data.shape)) for _ in range(4)]
    est = mwf(mags, mix)
    conservation = float(np.max(np.abs(sum(e.data for e in est) - mix.data)))
    s = rng.standard_normal(1000)
    half = sdr(s, 0.5 * s)
    passed = rt < 1e-6 and conservation <= 1e-10 and abs(half - 6.02) <= 0.01
    report(7, "DSP invariants", passed,
           f"STFT round trip {rt:.1e}; MWF sum error {conservation:.1e}; sdr(s, s/2) = {half:.4f} dB")
    assert passed


@pytest.fixture(scope="module")
def toy_data():
    spec = ModelSpec.toy("deq_umx")
    return spec, make_scene_set(64, spec, 0.8, 1), make_scene_set(16, spec, 0.8, 2), make_scene_set(16, spec, 0.8, 3)


TOY_SCHEDULE = TrainConfig(segment_seconds=0.4, pretrain_unroll_l=4, pretrain_epochs=20, l_max_after_pretrain=6,
                           epochs=180, batch_size=16, lr=1e-3, backward_mode="jfb", seed=0)


@pytest.mark.parametrize("target", ["tonal", "noise"])
def test_ac08_desk_scale_training(toy_data, target):
    spec, tr, va, te = toy_data
    j = ["tonal", "noise"].index(target)
    start = time.perf_counter()
    oracle = float(np.mean(te.oracle_mask_sdr(target)))
    model = SeparatorModel(spec, np.random.default_rng(0))
    result = train(model, tr.magnitudes(target), va.magnitudes(target), TOY_SCHEDULE, target)
    est = model.separate(te.magnitudes(target).mixtures)
    scores = [sdr(te.sources[i][j], istft(masked_estimates([est[i]], te.mixture_stfts[i])[0]))
              for i in range(len(te))]
    held_out = float(np.mean(scores))
    ratio = result.final_loss / result.initial_loss
    elapsed = time.perf_counter() - start
    stages = {e.stage for e in result.history}
    passed = (oracle >= 15 and held_out >= 10 and ratio < 0.2 and elapsed < 600
              and stages == {"pretrain_wt", "deq"})
    report(8, f"desk-scale training [{target}]", passed,
           f"held-out SDR {held_out:.2f} dB (min {min(scores):.2f}), ideal ratio mask {oracle:.2f} dB, "
           f"final/initial loss {ratio:.3f}, {len(result.history)} epochs, {elapsed:.0f}s")
    assert passed


def test_ac09_stage_switch_is_bit_exact(toy_data):
    spec, tr, va, _ = toy_data
    config = TrainConfig(segment_seconds=0.4, pretrain_epochs=5, epochs=0, seed=0)
    model = SeparatorModel(spec, np.random.default_rng(0))
    train(model, tr.magnitudes("tonal"), va.magnitudes("tonal"), config)
    x = va.magnitudes("tonal").mixtures
    model.set_weight_tied(config.pretrain_unroll_l)
    last_wt = model.separate(x)
    model.set_plain_probe(config.pretrain_unroll_l)
    first_eq = model.separate(x)
    identical = np.array_equal(last_wt, first_eq)
    passed = identical and model.last_nfe == config.pretrain_unroll_l
    report(9, "stage switch exactness", passed,
           f"bit-identical {identical}, max |diff| {np.max(np.abs(last_wt - first_eq)):.1e}, "
           f"nfe {model.last_nfe}")
    assert passed


def test_ac10_backward_memory_independent_of_depth():
    rng = np.random.default_rng(110)
    spec = ModelSpec.toy("deq_umx", hidden=8)
    mix = np.abs(rng.standard_normal((2, 1, 10, 65)))
    tgt = np.abs(rng.standard_normal((2, 1, 10, 65)))
    counts = {}
    for mode in ("jfb", "implicit"):
        for l_max in (2, 6, 20):
            model = SeparatorModel(spec, np.random.default_rng(0))
            # an unreachable tolerance makes the forward use the full budget
            model.set_equilibrium(SolverConfig(epsilon=1e-300, l_max=l_max), mode,
                                  backward_config=SolverConfig(epsilon=1e-10, l_max=200))
            with Tape() as tape:
                loss = mse_loss(model, mix, tgt)
                tape.backward(loss)
            assert model.last_nfe == l_max
            counts[mode, l_max] = (len(tape), model.seq.deq.last_backward_nodes)
    per_mode = {m: {v for (mm, _), v in counts.items() if mm == m} for m in ("jfb", "implicit")}
    passed = all(len(v) == 1 for v in per_mode.values())
    report(10, "memory contract", passed,
           "; ".join(f"{m}: tape nodes {sorted(v)} for l_max 2/6/20" for m, v in per_mode.items()))
    assert passed
