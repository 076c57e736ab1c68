"""Finite-difference gradient suite for the engine ops, the STT block and a tiny backbone."""

from __future__ import annotations

import time
from typing import Callable, List, Tuple

import numpy as np

from . import engine as E
from .engine import GradCheckReport, Tensor, grad_check

STEP = 1e-5
TOL = 1e-4


def _weighted(fn: Callable[[Tensor], Tensor], probe: np.ndarray) -> Callable[[Tensor], Tensor]:
    w = Tensor(probe)
    return lambda t: E.tsum(fn(t) * w)


def _check(fn, x, rng) -> GradCheckReport:
    with E.no_grad():
        shape = fn(Tensor(x)).shape
    return grad_check(_weighted(fn, rng.normal(size=shape)), x, STEP, TOL)


def engine_checks(seed: int = 0) -> List[Tuple[str, GradCheckReport]]:
    from .train import cross_entropy

    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    gamma, beta = rng.normal(size=6), rng.normal(size=6)
    cube5 = rng.normal(size=(2, 3, 4, 5, 3))
    pe = rng.normal(size=(1, 2, 2, 3, 2))
    conv_x = rng.normal(size=(2, 4, 3, 4, 4))
    conv_w = rng.normal(size=(6, 2, 3, 3, 3))
    targets = rng.integers(0, 5, size=4)
    out = [
        ("matmul[a]", _check(lambda t: E.matmul(t, Tensor(b)), a, rng)),
        ("matmul[b]", _check(lambda t: E.matmul(Tensor(a), t), b, rng)),
        ("softmax", _check(lambda t: E.softmax(t, axis=-1), a, rng)),
        ("layer_norm[x]", _check(lambda t: E.layer_norm(t, Tensor(gamma), Tensor(beta)),
                                 rng.normal(size=(3, 6)), rng)),
        ("layer_norm[gamma]", _check(lambda t: E.layer_norm(Tensor(a.reshape(4, 6)), t,
                                                            Tensor(beta)), gamma, rng)),
        ("gelu", _check(E.gelu, a, rng)),
        ("sigmoid", _check(E.sigmoid, a, rng)),
        ("relu", _check(E.relu, a + np.sign(a) * 0.1, rng)),
        ("add+mul broadcast", _check(lambda t: E.mul(E.add(t, Tensor(b[:1])), t), rng.normal(size=(3, 5)), rng)),
        ("mean_pool_spatial", _check(E.mean_pool_spatial, cube5, rng)),
        ("trilinear_interpolate", _check(lambda t: E.trilinear_interpolate(t, (3, 5, 4)), pe, rng)),
        ("conv3d_grouped[x]", _check(lambda t: E.conv3d_grouped(t, Tensor(conv_w), groups=2, padding=1),
                                     conv_x, rng)),
        ("conv3d_grouped[w]", _check(lambda t: E.conv3d_grouped(Tensor(conv_x), t, groups=2, padding=1),
                                     conv_w, rng)),
        ("conv3d_strided[x]", _check(lambda t: E.conv3d_grouped(t, Tensor(conv_w[:4]), groups=2,
                                                                stride=2, padding=1), conv_x, rng)),
        ("avg_pool3d", _check(lambda t: E.avg_pool3d(t, 2, 2), rng.normal(size=(2, 3, 4, 5, 4)), rng)),
        ("batch_norm", _check(lambda t: E.batch_norm(t, Tensor(gamma[:4]), Tensor(beta[:4]), np.zeros(4),
                                                     np.ones(4), training=True), conv_x, rng)),
        ("cross_entropy", (grad_check(lambda t: cross_entropy(t, targets), rng.normal(size=(4, 5)), STEP, TOL))),
        ("sub", _check(lambda t: E.sub(Tensor(b), t), rng.normal(size=(1, 5)), rng)),
        ("div", _check(lambda t: E.div(t, E.add(E.mul(t, t), 1.0)), a, rng)),
        ("power", _check(lambda t: E.power(t, 3.0), a, rng)),
        ("exp", _check(E.exp, a, rng)),
        ("log", _check(E.log, np.abs(a) + 0.5, rng)),
        ("sqrt", _check(E.sqrt, np.abs(a) + 0.5, rng)),
        ("tanh", _check(E.tanh, a, rng)),
        ("linear[x]", _check(lambda t: E.linear(t, Tensor(b), Tensor(b[0])), a, rng)),
        ("linear[w]", _check(lambda t: E.linear(Tensor(a), t, Tensor(b[0])), b, rng)),
        ("linear[b]", _check(lambda t: E.linear(Tensor(a), Tensor(b), t), b[0], rng)),
        ("sum", _check(lambda t: E.tsum(t, axis=1, keepdims=True), a, rng)),
        ("mean", _check(lambda t: E.mean(t, axis=(0, 2)), a, rng)),
        ("reshape+transpose", _check(lambda t: E.transpose(E.reshape(t, (4, 6)), (1, 0)), a, rng)),
        ("index", _check(lambda t: E.index(t, (slice(None), [0, 2, 2])), a, rng)),
        ("concat", _check(lambda t: E.concat([t, E.mul(t, t)], axis=1), a, rng)),
        ("log_softmax", _check(lambda t: E.log_softmax(t, axis=1), a, rng)),
        ("elementwise", _check(lambda t: E.elementwise(t, "mul", E.elementwise(t, "gelu")), a, rng)),
        ("dropout", _check(lambda t: E.dropout(t, 0.3, np.random.default_rng(7)), a, rng)),
    ]
    return out


def _set_path(obj, dotted: str, value) -> None:
    *head, last = dotted.split(".")
    for part in head:
        obj = getattr(obj, part)
    setattr(obj, last, value)


# Adding a constant to every key shifts a query's scores uniformly and softmax
# ignores it, so these gradients are exactly zero and only an absolute bound
# on the finite-difference noise is meaningful.
STRUCTURALLY_ZERO = (".k.bias",)
ZERO_ATOL = 1e-8


def _param_checks(prefix: str, params, named, forward, rng) -> List[Tuple[str, GradCheckReport]]:
    """Grad-check ``forward()`` against each named parameter in turn."""
    out = []
    with E.no_grad():
        probe = rng.normal(size=forward().shape)
    for name, tensor in named:
        def f(t, name=name, tensor=tensor):
            _set_path(params, name, t)
            try:
                return E.tsum(forward() * Tensor(probe))
            finally:
                _set_path(params, name, tensor)
        if name.endswith(STRUCTURALLY_ZERO):
            out.append((f"{prefix}[{name}] (zero)", grad_check(f, tensor.data, STEP, TOL, atol=ZERO_ATOL)))
        else:
            out.append((f"{prefix}[{name}]", grad_check(f, tensor.data, STEP, TOL)))
    return out


def stt_checks(seed: int = 0) -> List[Tuple[str, GradCheckReport]]:
    """Full block at B=1, D=3, H=W=2, C_in=4, C=4, heads=2."""
    from .stt import SttConfig, init_stt_params, stt_forward

    rng = np.random.default_rng(seed)
    cfg = SttConfig(d_model=4, heads=2, pe_init=(2, 3, 3), init_std=0.4)
    params = init_stt_params(cfg, 4, rng, dtype=np.float64)
    x = rng.normal(size=(1, 3, 2, 2, 4))
    out = [("stt_forward[x]", _check(lambda t: stt_forward(t, params, cfg), x, rng))]
    xt = Tensor(x)
    out += _param_checks("stt_forward", params, list(params.named_parameters()),
                         lambda: stt_forward(xt, params, cfg), rng)
    return out


def backbone_checks(seed: int = 0) -> List[Tuple[str, GradCheckReport]]:
    from .backbone import BackboneConfig, build_model
    from .train import cross_entropy

    cfg = BackboneConfig(stages=(1, 1), k0=2, heads=2, conv_groups=2, num_classes=3, input_bands=4,
                         patch=(3, 3), pe_init=(2, 2, 2))
    model = build_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(2, 4, 3, 3))
    targets = np.array([0, 2])
    return [("backbone[x]", grad_check(lambda t: cross_entropy(model(t, training=True), targets), x,
                                        STEP, TOL))]


SUITES = {"engine": engine_checks, "stt": stt_checks, "backbone": backbone_checks}


def run_suite(module: str = "all", echo=print) -> bool:
    names = list(SUITES) if module == "all" else [module]
    ok = True
    for suite in names:
        t0 = time.perf_counter()
        for name, rep in SUITES[suite]():
            echo(f"{suite:8s} {name:40s} {rep}")
            ok &= rep.passed
        echo(f"{suite:8s} done in {time.perf_counter() - t0:.1f}s")
    return ok
