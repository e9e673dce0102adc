"""Finite-difference gradient oracle and the op-level check suite."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as ops
from .tensor import Tape, Tensor


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    sample_per_input: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between taped gradients and central differences.

    `f` must be scalar-valued on `inputs`, all float64 with requires_grad
    set. Each element of each input is perturbed by +-eps (or a random
    subset of `sample_per_input` elements when given, for large models).
    Relative error per element is |analytic - numeric| / max(1, |numeric|).
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.zero_grad()
    with Tape() as tape:
        out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    tape.backward(out)

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        if sample_per_input is None or sample_per_input >= flat.size:
            indices = range(flat.size)
        else:
            indices = (rng or np.random.default_rng(0)).choice(flat.size, size=sample_per_input, replace=False)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(*inputs).item()
            flat[i] = orig - eps
            f_minus = f(*inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, rel)
    return worst


def _rand(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True, dtype=np.float64)


def _rand_off_kink(rng, *shape):
    # relu subgradient checks need inputs away from 0 (within 1e-3 the
    # central difference straddles the kink)
    a = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(a, requires_grad=True, dtype=np.float64)


def op_checks(seed: int, eps: float = 1e-5) -> dict[str, float]:
    """One gradient check per primitive op at small random shapes.

    Returns {op name: max relative error} for a single seed; callers sweep
    seeds. Shapes stay tiny (extents <= 6) so full per-element differencing
    is cheap.
    """
    rng = np.random.default_rng(seed)
    results = {}

    def run(name, f, *inputs):
        results[name] = grad_check(f, inputs, eps=eps)

    run("add", lambda a, b: (a + b).sum(), _rand(rng, 3, 4), _rand(rng, 3, 4))
    run("add_broadcast", lambda a, b: (a + b).sum(), _rand(rng, 3, 4), _rand(rng, 1, 4))
    run("sub", lambda a, b: (a - b).sum(), _rand(rng, 2, 5), _rand(rng, 2, 5))
    run("mul", lambda a, b: (a * b).sum(), _rand(rng, 3, 4), _rand(rng, 3, 4))
    run("mul_broadcast", lambda a, b: (a * b).sum(), _rand(rng, 4, 3, 2, 2), _rand(rng, 4, 1, 1, 1))
    bden = Tensor(np.random.default_rng(seed + 1).uniform(0.5, 1.5, (3, 3)), requires_grad=True, dtype=np.float64)
    run("div", lambda a, b: (a / b).sum(), _rand(rng, 3, 3), bden)
    run("neg", lambda a: (-a).sum(), _rand(rng, 4))
    run("relu", lambda a: ops.relu(a).sum(), _rand_off_kink(rng, 4, 5))
    run("sigmoid", lambda a: ops.sigmoid(a).sum(), _rand(rng, 4, 5))
    run("softmax", lambda a: (ops.softmax(a, axis=1) * ops.softmax(a, axis=1)).sum(), _rand(rng, 3, 5))
    run(
        "layer_norm",
        lambda a, g, b: (ops.layer_norm(a, g, b) * ops.layer_norm(a, g, b)).sum(),
        _rand(rng, 3, 6),
        _rand(rng, 6),
        _rand(rng, 6),
    )
    run(
        "group_norm",
        lambda a, g, b: (ops.group_norm(a, g, b, groups=2) * ops.group_norm(a, g, b, groups=2)).sum(),
        _rand(rng, 2, 4, 3, 3),
        _rand(rng, 4),
        _rand(rng, 4),
    )
    run("linear", lambda x, w, b: ops.linear(x, w, b).sum(), _rand(rng, 2, 3, 4), _rand(rng, 5, 4), _rand(rng, 5))
    run("matmul_batched", lambda a, b: matmul_sq(a, b), _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 5))
    run(
        "conv2d",
        lambda x, w, b: ops.conv2d(x, w, b, stride=(2, 1), padding=(1, 2), dilation=(1, 2)).sum(),
        _rand(rng, 2, 3, 5, 6),
        _rand(rng, 4, 3, 3, 2),
        _rand(rng, 4),
    )
    run("conv2d_plain", lambda x, w: ops.conv2d(x, w, padding=1).sum(), _rand(rng, 2, 2, 4, 4), _rand(rng, 3, 2, 3, 3))
    run("adaptive_global_avg_pool", lambda x: sq_sum(ops.adaptive_global_avg_pool(x)), _rand(rng, 2, 3, 4, 5))
    run("avg_pool2x2", lambda x: sq_sum(ops.avg_pool2x2(x)), _rand(rng, 2, 3, 4, 6))
    run("resize_bilinear", lambda x: sq_sum(ops.resize_bilinear(x, 5, 3)), _rand(rng, 2, 2, 3, 4))
    run("upsample2x", lambda x: sq_sum(ops.upsample2x(x)), _rand(rng, 1, 2, 3, 4))
    run("concat", lambda a, b: sq_sum(ops.concat([a, b], axis=1)), _rand(rng, 2, 3, 2), _rand(rng, 2, 4, 2))
    run("reshape", lambda a: sq_sum(a.reshape(6, 2)), _rand(rng, 3, 4))
    run("permute", lambda a: sq_sum(a.permute(2, 0, 1)), _rand(rng, 2, 3, 4))
    run("sum_axis", lambda a: sq_sum(a.sum(axis=1)), _rand(rng, 3, 4, 2))
    run("mean_axis", lambda a: sq_sum(a.mean(axis=0)), _rand(rng, 3, 4))
    targets = Tensor(np.random.default_rng(seed + 2).integers(0, 2, (3, 4)).astype(np.float64))
    run("bce_with_logits", lambda z: ops.bce_with_logits(z, targets).mean(), _rand(rng, 3, 4))
    return results


def sq_sum(t: Tensor) -> Tensor:
    # sum of squares makes the loss depend nonuniformly on every element,
    # catching backward rules that only work for constant output gradients
    return (t * t).sum()


def matmul_sq(a: Tensor, b: Tensor) -> Tensor:
    return sq_sum(ops.matmul_batched(a, b))


def model_check(
    seed: int,
    eps: float = 1e-5,
    sample_per_param: int = 3,
) -> float:
    """End-to-end check of a tiny full network: d mean(sigmoid(logits)) / d theta.

    Perturbs a random subset of elements in every parameter tensor (full
    differencing over ~30k parameters would take hours; the per-parameter
    sample across seeds covers each tensor many times over).
    """
    from .model import FUnet, FUnetConfig

    cfg = FUnetConfig(
        t_frames=3,
        base_channels=4,
        depth=2,
        csa_grid=4,
        csa_heads=2,
        input_h=16,
        input_w=28,
    )
    rng = np.random.default_rng(seed)
    model = FUnet(cfg, seed=seed, dtype=np.float64)
    clip = Tensor(rng.uniform(0.0, 1.0, size=(1, cfg.t_frames, cfg.in_channels, cfg.input_h, cfg.input_w)), dtype=np.float64)
    params = [t for _, t in model.named_parameters()]

    def f(*_):
        return ops.sigmoid(model.forward(clip)).mean()

    return grad_check(f, params, eps=eps, sample_per_input=sample_per_param, rng=rng)


def run_suite(
    seeds: Sequence[int],
    eps: float = 1e-5,
    with_model: bool = True,
    sample_per_param: int = 1,
) -> dict[str, float]:
    """Worst relative error per op (and end-to-end) across the given seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, err in op_checks(seed, eps=eps).items():
            worst[name] = max(worst.get(name, 0.0), err)
        if with_model:
            err = model_check(seed, eps=eps, sample_per_param=sample_per_param)
            worst["funet_end_to_end"] = max(worst.get("funet_end_to_end", 0.0), err)
    return worst
