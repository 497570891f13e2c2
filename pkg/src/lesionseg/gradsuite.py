"""The standing gradient checks over every primitive and loss."""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, grad_check, relative_error
from .losses import LossConfig, focal_tversky_tensor, hybrid_loss_tensor, weighted_bce_tensor
from .network import ModelParams, build_model, cpb_penalty, forward
from .tensor import GradTape, RunningStats, Tensor

PRIMITIVE_TOL = 1e-3
END_TO_END_TOL = 5e-3
# float64 end-to-end probe; a 1e-3 step can straddle ReLU kinks deep in the net
END_TO_END_STEP = 1e-5


def _conv_case(stride: int, dilation: int, k: int = 3, shape=(2, 3, 8, 8), cout: int = 4):
    def run(rng):
        x = rng.standard_normal(shape)
        w = rng.standard_normal((cout, shape[1], k, k)) * 0.5
        b = rng.standard_normal(cout)
        return grad_check(lambda a, kk, bb: T.conv2d(a, kk, bb, stride=stride, dilation=dilation),
                          [x, w, b], PRIMITIVE_TOL, name=f"conv2d k{k} s{stride} d{dilation}")
    return run


def _bn_case(mode: str):
    def run(rng):
        x = rng.standard_normal((2, 3, 4, 4)) * 2 + 1
        scale = rng.uniform(0.5, 1.5, 3)
        shift = rng.standard_normal(3)
        stats = RunningStats(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))

        def fn(a, s, t):
            st = RunningStats(stats.mean.copy(), stats.var.copy())
            return T.batch_norm(a, s, t, st, mode=mode)

        return grad_check(fn, [x, scale, shift], PRIMITIVE_TOL, name=f"batch_norm {mode}")
    return run


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _unary(name, fn, shape=(2, 3, 8, 8)):
    def run(rng):
        return grad_check(fn, [_away_from_zero(rng, shape)], PRIMITIVE_TOL, name=name)
    return run


def _binary(name, fn, shape_a, shape_b):
    def run(rng):
        return grad_check(fn, [rng.standard_normal(shape_a), rng.standard_normal(shape_b)], PRIMITIVE_TOL, name=name)
    return run


def _probs_and_truth(rng, shape=(2, 1, 8, 8)):
    p = rng.uniform(0.05, 0.95, shape)
    g = (rng.random(shape) < 0.3).astype(np.float64)
    return p, g


def _loss_case(name, make):
    def run(rng):
        p, g = _probs_and_truth(rng)
        return grad_check(lambda t: make(t, g), [p], PRIMITIVE_TOL, name=name)
    return run


def primitive_checks() -> "OrderedDict[str, Callable[[np.random.Generator], GradCheckReport]]":
    cfg = LossConfig()
    checks = OrderedDict()
    for s, d in [(1, 1), (2, 1), (1, 2), (1, 4), (1, 8), (2, 2)]:
        checks[f"conv2d_s{s}_d{d}"] = _conv_case(s, d)
    checks["conv2d_1x1_s2"] = _conv_case(2, 1, k=1)
    checks["batch_norm_train"] = _bn_case("train")
    checks["batch_norm_eval"] = _bn_case("eval")
    checks["relu"] = _unary("relu", T.relu)
    checks["sigmoid"] = _unary("sigmoid", T.sigmoid)
    checks["upsample2x"] = _unary("upsample2x", T.upsample2x, (2, 3, 4, 4))
    checks["concat_channels"] = _binary("concat_channels", T.concat_channels, (2, 3, 4, 4), (2, 2, 4, 4))
    checks["add"] = _binary("add", T.add, (2, 3, 8, 8), (2, 3, 8, 8))
    checks["weighted_bce"] = _loss_case("weighted_bce", lambda t, g: weighted_bce_tensor(t, g, 3.0))
    checks["focal_tversky"] = _loss_case("focal_tversky", lambda t, g: focal_tversky_tensor(t, g, cfg))
    checks["hybrid"] = _loss_case("hybrid", lambda t, g: hybrid_loss_tensor(t, g, cfg))
    return checks


def _as_float64(params: ModelParams) -> ModelParams:
    out = params.snapshot()
    for name, t in out.tensors.items():
        out.tensors[name] = Tensor(t.data.astype(np.float64), requires_grad=True, name=name, dtype=np.float64)
    return out


def end_to_end_check(samples: int = 20, seed: int = 0, base_width: int = 4, size: int = 32,
                     l2_coefficient: float = 1e-4, step: float = END_TO_END_STEP) -> GradCheckReport:
    """Total loss vs. ``samples`` randomly chosen scalar parameters, float64 throughout."""
    rng = np.random.default_rng(seed)
    params = _as_float64(build_model(base_width=base_width, cpb_enabled=True, seed=seed))
    x = Tensor(rng.standard_normal((1, 1, size, size)), dtype=np.float64)
    yy, xx = np.mgrid[:size, :size]
    truth = (((yy - size * 0.4) ** 2 + (xx - size * 0.6) ** 2) < (size * 0.2) ** 2).astype(np.float64)[None, None]
    cfg = LossConfig()

    def total_loss():
        probs = forward(params, x, mode="train")
        return T.add(hybrid_loss_tensor(probs, truth, cfg), cpb_penalty(params, l2_coefficient))

    with GradTape() as tape:
        loss = total_loss()
    names = params.names()
    grads = dict(zip(names, tape.gradient(loss, params.trainable())))

    # weight the draw by parameter count so large kernels are sampled fairly
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    errors = []
    for _ in range(samples):
        name = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        idx = int(rng.integers(params[name].size))
        data = params[name].data
        orig = data.flat[idx]
        data.flat[idx] = orig + step
        up = float(total_loss().data)
        data.flat[idx] = orig - step
        down = float(total_loss().data)
        data.flat[idx] = orig
        numeric = (up - down) / (2 * step)
        errors.append(float(relative_error(grads[name].flat[idx], numeric)))
    return GradCheckReport("end_to_end", errors, END_TO_END_TOL)


def run_suite(seed: int = 0, include_end_to_end: bool = True) -> list[GradCheckReport]:
    reports = []
    for i, (name, check) in enumerate(primitive_checks().items()):
        report = check(np.random.default_rng([seed, i]))
        report.name = name
        reports.append(report)
    if include_end_to_end:
        reports.append(end_to_end_check(seed=seed))
    return reports


def format_reports(reports: list[GradCheckReport]) -> str:
    lines = [f"{'check':<20} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in reports:
        lines.append(f"{r.name:<20} {r.max_rel_error:>12.3e} {r.tolerance:>8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
