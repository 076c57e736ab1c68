"""Acceptance criteria 1-10, one test each; every test records a PASS/FAIL line.

Criteria 9 and 10 train the desk-scale model twice through the command line
(about five minutes on one core in total).
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from stnet import engine as E
from stnet.backbone import BackboneConfig, build_model, channel_plan, growth_schedule
from stnet.engine import Tensor
from stnet.hsi import HsiCube, PatchSpec, pad_edges
from stnet.metrics import ConfusionMatrix, metrics
from stnet.stt import (SttConfig, fuse_attention, gffn, init_stt_params, positional_encoding,
                       spatial_attention, spectral_attention)

DESK_EPOCHS = 15


def check(acceptance, cid, ok, detail):
    acceptance(cid, bool(ok), detail)
    assert ok, f"criterion {cid}: {detail}"


def block(c=8, heads=2, pe=(2, 3, 3), seed=0, c_in=None):
    cfg = SttConfig(d_model=c, heads=heads, pe_init=pe, init_std=0.3)
    return cfg, init_stt_params(cfg, c_in or c, np.random.default_rng(seed), np.float64)


# 1 -------------------------------------------------------------------------

def test_criterion_01_gradient_suite(acceptance):
    from stnet.checks import engine_checks, stt_checks

    t0 = time.perf_counter()
    reports = engine_checks() + stt_checks()
    elapsed = time.perf_counter() - t0
    failed = [name for name, rep in reports if not rep.passed]
    ratio = [rep.max_rel_error for name, rep in reports if not name.endswith("(zero)")]
    n_zero = len(reports) - len(ratio)
    check(acceptance, 1, not failed and max(ratio) < 1e-4 and elapsed < 60.0,
          f"{len(reports)} checks, failed={failed}, worst rel err {max(ratio):.2e} "
          f"({n_zero} zero-by-construction key biases bounded in abs), {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------

def test_criterion_02_attention_invariants(acceptance):
    t0 = time.perf_counter()
    worst_row, worst_eq, worst_inv = 0.0, 0.0, 0.0
    for seed in range(20):
        _, p = block(seed=seed)
        p.pos_embed.data[:] = 0.0
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(2, 3, 3, 4, 8))
        perm = rng.permutation(12)

        def shuffle(a):
            b, d, h, w, c = a.shape
            return a.reshape(b, d, h * w, c)[:, :, perm].reshape(b, d, h, w, c)

        s, ws = spatial_attention(Tensor(x), p, 2, return_weights=True)
        t, wt = spectral_attention(Tensor(x), p, 2, return_weights=True)
        worst_row = max(worst_row, np.abs(ws.sum(-1) - 1).max(), np.abs(wt.sum(-1) - 1).max())
        s2 = spatial_attention(Tensor(shuffle(x)), p, 2).data
        t2 = spectral_attention(Tensor(shuffle(x)), p, 2).data
        worst_eq = max(worst_eq, np.abs(s2 - shuffle(s.data)).max())
        worst_inv = max(worst_inv, np.abs(t2 - t.data).max())
    elapsed = time.perf_counter() - t0
    ok = worst_row <= 1e-6 and worst_eq <= 1e-6 and worst_inv <= 1e-6 and elapsed < 10.0
    check(acceptance, 2, ok, f"row-sum err {worst_row:.1e}, equivariance {worst_eq:.1e}, "
                             f"invariance {worst_inv:.1e}, {elapsed:.2f}s")


# 3 -------------------------------------------------------------------------

def test_criterion_03_gate_identities(acceptance):
    _, p = block()
    x = Tensor(np.random.default_rng(5).normal(size=(2, 3, 2, 2, 8)))
    s, t = spatial_attention(x, p, 2), spectral_attention(x, p, 2)
    t_broadcast = np.broadcast_to(t.data.transpose(1, 0, 2)[:, :, None, None, :], s.shape)
    d_one = np.abs(fuse_attention(s, t, 1.0).data - s.data).max()
    d_zero = np.abs(fuse_attention(s, t, 0.0).data - t_broadcast).max()

    y = np.random.default_rng(6).normal(size=(2, 3, 2, 2, 8))
    p.gate_ffn.weight.data[:] = 0.0
    p.gate_ffn.bias.data[:] = -20.0
    closed = np.abs(gffn(Tensor(y), p).data).max()
    p.gate_ffn.bias.data[:] = 20.0
    main = p.ffn2(E.gelu(p.ffn1(Tensor(y)))).data
    opened = np.abs(gffn(Tensor(y), p).data - main).max()
    ok = max(d_one, d_zero, closed, opened) < 1e-6
    check(acceptance, 3, ok, f"g=1 diff {d_one:.1e}, g=0 diff {d_zero:.1e}, closed max {closed:.1e}, "
                             f"open diff {opened:.1e}")


# 4 -------------------------------------------------------------------------

def closed_form_trilinear(grid, size):
    """Per-sample 8-corner weighted sum with align-corners source coordinates."""
    out = np.zeros(size)
    n_in = grid.shape

    def coord(i, n_out, n):
        if n_out == 1 or n == 1:
            return 0, 0, 0.0
        src = i * (n - 1) / (n_out - 1)
        lo = min(int(np.floor(src)), n - 2)
        return lo, lo + 1, src - lo

    for i in range(size[0]):
        a0, a1, fa = coord(i, size[0], n_in[0])
        for j in range(size[1]):
            b0, b1, fb = coord(j, size[1], n_in[1])
            for k in range(size[2]):
                c0, c1, fc = coord(k, size[2], n_in[2])
                v = 0.0
                for ia, wa in ((a0, 1 - fa), (a1, fa)):
                    for ib, wb in ((b0, 1 - fb), (b1, fb)):
                        for ic, wc in ((c0, 1 - fc), (c1, fc)):
                            v += wa * wb * wc * grid[ia, ib, ic]
                out[i, j, k] = v
    return out


def test_criterion_04_positional_encoding(acceptance):
    _, p = block(c=4, pe=(3, 4, 5))
    same = positional_encoding(p, (3, 4, 5)).data
    exact = np.array_equal(same, p.pos_embed.data.transpose(0, 2, 3, 4, 1))
    doubled = positional_encoding(p, (6, 8, 10)).data
    err = max(np.abs(doubled[0, ..., ch] - closed_form_trilinear(p.pos_embed.data[0, ch], (6, 8, 10))).max()
              for ch in range(4))
    check(acceptance, 4, exact and err < 1e-6, f"identity exact={exact}, 2x max err {err:.1e}")


# 5 -------------------------------------------------------------------------

def test_criterion_05_growth_and_channels(acceptance):
    growth = growth_schedule(BackboneConfig(stages=(4, 6, 8), k0=8))
    rng = np.random.default_rng(2024)
    mismatches = []
    for _ in range(20):
        n_stages = int(rng.integers(1, 4))
        stages = tuple(int(s) for s in rng.integers(1, 5, n_stages))
        groups = int(rng.choice([1, 2, 4]))
        k0 = groups * int(rng.integers(1, 3))
        layers = int(rng.integers(1, 3))
        cfg = BackboneConfig(stages=stages, k0=k0, heads=1, conv_groups=groups, num_classes=3,
                             input_bands=4, patch=(5, 5), layers_per_block=layers, pe_init=(1, 2, 2))
        plan = channel_plan(cfg)
        c0, outs = 2 * k0, []
        for m, n in enumerate(stages):
            c_in = c0 + sum(outs)
            expect_layers = [c_in + j * k0 * 2 ** m for j in range(n * layers)]
            if plan["layer_in"][m] != expect_layers or plan["stage_in"][m] != c_in:
                mismatches.append((cfg, m))
            outs.append(c_in + n * layers * k0 * 2 ** m)
        model = build_model(cfg, seed=0, dtype=np.float64)
        built = [[layer.conv1.shape[1] * groups for blk in st for layer in blk.layers] for st in model.stages]
        if built != plan["layer_in"] or model.head.weight.shape[0] != outs[-1]:
            mismatches.append((cfg, "built"))
    ok = growth == [8, 16, 32] and not mismatches
    check(acceptance, 5, ok, f"growth {growth}, 20 random configs, mismatches={len(mismatches)}")


# 6 -------------------------------------------------------------------------

def test_criterion_06_stt_transparency(acceptance):
    cfg = BackboneConfig(stages=(2, 2), k0=4, heads=2, num_classes=4, input_bands=20, patch=(7, 7),
                         stt_zero_init=True)
    model = build_model(cfg, seed=42)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        x = Tensor(rng.normal(size=(2, 20, 7, 7)).astype(np.float32))
        worst = max(worst, np.abs(model(x).data - model(x, use_stt=False).data).max())
    check(acceptance, 6, worst < 1e-6, f"max abs diff over 10 inputs {worst:.1e}")


# 7 -------------------------------------------------------------------------

def test_criterion_07_padding_anchor(acceptance):
    out = pad_edges(HsiCube(np.zeros((2, 145, 145), np.float32)), PatchSpec(11, 11))
    check(acceptance, 7, out.shape[1:] == (155, 155), f"145x145, M=11 -> {out.shape[1]}x{out.shape[2]}")


# 8 -------------------------------------------------------------------------

def test_criterion_08_metrics_oracle(acceptance):
    from test_train_eval import brute_force_scores

    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 7))
        n = int(rng.integers(1, 80))
        truth = rng.integers(0, k, n)
        pred = np.where(rng.random(n) < 0.5, truth, rng.integers(0, k, n))
        got = metrics(ConfusionMatrix.from_pairs(truth, pred, k))
        worst = max(worst, np.abs(np.subtract(got, brute_force_scores(list(truth), list(pred), k))).max())
    hand = metrics(ConfusionMatrix([[4, 1], [1, 4]]))
    hand_ok = np.allclose(hand, (0.8, 0.8, 0.6), atol=1e-12)
    check(acceptance, 8, worst <= 1e-12 and hand_ok,
          f"100 matrices max diff {worst:.1e}; [[4,1],[1,4]] -> ({hand.oa:.3f}, {hand.aa:.3f}, {hand.kappa:.3f})")


# 9 and 10 ------------------------------------------------------------------

def _single_core_env():
    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        env[var] = "1"
    return env


def _pin_one_core():
    if hasattr(os, "sched_setaffinity"):
        os.sched_setaffinity(0, {min(os.sched_getaffinity(0))})


def _stnet(*args, cwd):
    proc = subprocess.run([sys.executable, "-m", "stnet.cli", *args], cwd=cwd, env=_single_core_env(),
                          capture_output=True, text=True, preexec_fn=_pin_one_core)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def desk_run(workdir):
    workdir.mkdir()
    t0 = time.perf_counter()
    _stnet("synth", "--seed", "42", "--bands", "20", "--height", "32", "--width", "32", "--classes", "4",
           "--noise", "0.1", "--out", "scene", cwd=workdir)
    _stnet("split", "--cube", "scene.cube", "--labels", "scene.labels", "--ratios", "6:1:3", "--seed", "42",
           "--out", "split.txt", cwd=workdir)
    (workdir / "desk.cfg").write_text(f"stages=2,2\nk0=4\nheads=2\npatch=7,7\nepochs={DESK_EPOCHS}\nseed=42\n")
    _stnet("train", "--cube", "scene.cube", "--labels", "scene.labels", "--split", "split.txt",
           "--config", "desk.cfg", "--out-ckpt", "model.ckpt", "--curves-csv", "curves.csv", cwd=workdir)
    elapsed = time.perf_counter() - t0
    out = _stnet("eval", "--ckpt", "model.ckpt", "--cube", "scene.cube", "--labels", "scene.labels",
                 "--split", "split.txt", cwd=workdir)
    scores = dict(part.split("=") for part in out.split()[:3])
    return {k: float(v) for k, v in scores.items()}, elapsed


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("desk")
    first = desk_run(base / "run1")
    second = desk_run(base / "run2")
    return base, first, second


@pytest.mark.slow
def test_criterion_09_desk_run(acceptance, desk_runs):
    _, (scores, elapsed), _ = desk_runs
    ok = scores["OA"] >= 0.95 and scores["Kappa"] >= 0.90 and elapsed < 600.0
    check(acceptance, 9, ok, f"OA={scores['OA']:.4f} AA={scores['AA']:.4f} Kappa={scores['Kappa']:.4f}, "
                             f"{DESK_EPOCHS} epochs, {elapsed:.0f}s single core")


@pytest.mark.slow
def test_criterion_10_determinism(acceptance, desk_runs):
    base, _, _ = desk_runs
    same = {name: (base / "run1" / name).read_bytes() == (base / "run2" / name).read_bytes()
            for name in ("curves.csv", "model.ckpt", "model.ckpt.cfg")}
    check(acceptance, 10, all(same.values()), f"byte-identical: {same}")
