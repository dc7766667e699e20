"""Finite-difference gradient suite over every differentiable op and the full model loss."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .losses import LossWeights, self_supervised_guided, total_loss
from .model import DirecFormer, ModelConfig
from .tensor import Tensor, finite_diff_check

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    worst: float
    points: int

    @property
    def ok(self) -> bool:
        return self.worst <= TOLERANCE


def _weights(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _op_cases(rng):
    """(name, builder) pairs; builder(rng) -> (scalar function, point)."""
    def probe(shape):
        # fixed random readout so that every output coordinate matters
        return _weights(rng, shape)

    def case_matmul(r):
        b, c = _weights(r, (4, 3)), probe((5, 3))
        return lambda x: (tn.matmul(x, b) * c).sum(), r.standard_normal((5, 4))

    def case_matmul_right(r):
        a, c = _weights(r, (2, 5, 4)), probe((2, 5, 3))
        return lambda x: (tn.matmul(a, x) * c).sum(), r.standard_normal((4, 3))

    def case_linear(r):
        w, b, c = _weights(r, (4, 3)), _weights(r, (3,)), probe((5, 3))
        return lambda x: (tn.linear(x, w, b) * c).sum(), r.standard_normal((5, 4))

    def case_add(r):
        y, c = _weights(r, (3, 4)), probe((3, 4))
        return lambda x: (tn.add(x, y) * c).sum(), r.standard_normal((1, 4))

    def case_sub(r):
        y, c = _weights(r, (3, 4)), probe((3, 4))
        return lambda x: (tn.sub(y, x) * c).sum(), r.standard_normal((3, 4))

    def case_mul(r):
        y, c = _weights(r, (3, 4)), probe((3, 4))
        return lambda x: (tn.mul(x, y) * c).sum(), r.standard_normal((3, 4))

    def case_scale(r):
        c = probe((3, 4))
        return lambda x: (tn.scale(x, -1.7) * c).sum(), r.standard_normal((3, 4))

    def case_gelu(r):
        c = probe((3, 4))
        return lambda x: (tn.gelu(x) * c).sum(), r.standard_normal((3, 4))

    def case_exp(r):
        c = probe((3, 4))
        return lambda x: (tn.exp(x) * c).sum(), r.standard_normal((3, 4))

    def case_reshape_transpose(r):
        c = probe((4, 3, 2))
        return lambda x: (x.reshape(2, 3, 4).transpose(2, 1, 0) * c).sum(), r.standard_normal((6, 4))

    def case_getitem(r):
        c = probe((3, 2))
        idx = (np.array([0, 2, 2]), slice(1, 3))
        return lambda x: (x[idx] * c).sum(), r.standard_normal((3, 4))

    def case_concat(r):
        y, c = _weights(r, (2, 4)), probe((5, 4))
        return lambda x: (tn.concat([x, y], axis=0) * c).sum(), r.standard_normal((3, 4))

    def case_broadcast(r):
        c = probe((3, 4))
        return lambda x: (tn.broadcast_to(x, (3, 4)) * c).sum(), r.standard_normal((1, 4))

    def case_sum_mean(r):
        c = probe((3,))
        return lambda x: (x.sum(axis=1) * c).sum() + x.mean() * 2.0, r.standard_normal((3, 4))

    def case_layer_norm(r):
        g, b, c = _weights(r, (6,)), _weights(r, (6,)), probe((4, 6))
        return lambda x: (tn.layer_norm(x, g, b) * c).sum(), r.standard_normal((4, 6))

    def case_layer_norm_gain(r):
        x, b, c = _weights(r, (4, 6)), _weights(r, (6,)), probe((4, 6))
        return lambda g: (tn.layer_norm(x, g, b) * c).sum(), r.standard_normal(6)

    def case_standardize(r):
        c = probe((4, 6))
        return lambda x: (tn.standardize(x) * c).sum(), r.standard_normal((4, 6))

    def case_norm_linear(r):
        g, b, w, lb, c = (_weights(r, (6,)), _weights(r, (6,)), _weights(r, (6, 3)),
                          _weights(r, (3,)), probe((4, 3)))
        return lambda x: (tn.norm_linear(x, g, b, w, lb) * c).sum(), r.standard_normal((4, 6))

    def case_norm_linear_weight(r):
        x, g, b, lb, c = (_weights(r, (4, 6)), _weights(r, (6,)), _weights(r, (6,)),
                          _weights(r, (3,)), probe((4, 3)))
        return lambda w: (tn.norm_linear(x, g, b, w, lb) * c).sum(), r.standard_normal((6, 3))

    def case_l2_normalize(r):
        c = probe((3, 5))
        return lambda x: (tn.l2_normalize(x) * c).sum(), r.standard_normal((3, 5))

    def case_cosine_q(r):
        k, c = _weights(r, (5, 4)), probe((3, 5))
        return lambda q: (tn.cosine_rows(q, k) * c).sum(), r.standard_normal((3, 4))

    def case_cosine_k(r):
        q, c = _weights(r, (3, 4)), probe((3, 5))
        return lambda k: (tn.cosine_rows(q, k) * c).sum(), r.standard_normal((5, 4))

    def case_softmax(r):
        c = probe((3, 5))
        return lambda x: (tn.softmax_rows(x) * c).sum(), r.standard_normal((3, 5))

    def case_log_softmax(r):
        c = probe((3, 5))
        return lambda x: (tn.log_softmax(x) * c).sum(), r.standard_normal((3, 5))

    def case_cross_entropy(r):
        t = r.integers(0, 6, size=4)
        return lambda x: tn.cross_entropy(x, t), r.standard_normal((4, 6))

    def case_guided(r):
        B, h, N, T = 2, 2, 3, 4
        orders = np.stack([r.permutation(T) for _ in range(B)])
        return (lambda a: self_supervised_guided([tn.scale(a, 1.0), a * a], orders),
                r.uniform(-1, 1, (B, h, N, T, T + 1)))

    return [(name[len("case_"):], fn) for name, fn in sorted(locals().items())
            if name.startswith("case_")]


def op_suite(points: int = 20, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, build in _op_cases(rng):
        worst = 0.0
        for _ in range(points):
            f, x = build(rng)
            worst = max(worst, finite_diff_check(f, x))
        results.append(CheckResult(name, worst, points))
    return results


def gradcheck_config(**kw) -> ModelConfig:
    base = dict(depth=2, frames=8, height=32, width=32, channels=1, patch=8, dim=64, heads=4,
                mlp_hidden=128, classes=8, order_classes=12, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def _active_model(cfg: ModelConfig, seed: int) -> DirecFormer:
    """Random init with the zero-initialized pieces made nonzero, so every
    path through the network carries gradient."""
    model = DirecFormer(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if name.endswith(".bias") or name == "pos_embed" or ".out." in name:
            p.data[...] = 0.05 * rng.standard_normal(p.shape)
        if name.endswith("ln.gain"):
            p.data[...] = 1.0 + 0.1 * rng.standard_normal(p.shape)
    return model


def model_loss_check(cfg: ModelConfig | None = None, seed: int = 0, coords: int = 6,
                     names: list[str] | None = None, h: float = 1e-4) -> CheckResult:
    """Full composed loss (classification, order, guided) against central
    differences, sampled coordinates from every parameter tensor.

    The loss is O(1) while some parameter gradients are O(1e-7), so the step
    is 1e-4: at 1e-5 the difference quotient carries ~1e-10 of round-off,
    which is already 1e-3 relative on the smallest coordinates.
    """
    cfg = cfg or gradcheck_config()
    model = _active_model(cfg, seed)
    rng = np.random.default_rng(seed + 2)
    x = rng.uniform(0, 1, (2, cfg.frames, cfg.height, cfg.width, cfg.channels))
    orders = np.stack([rng.permutation(cfg.frames) for _ in range(2)])
    xp = x[np.arange(2)[:, None], orders]
    y = rng.integers(0, cfg.classes, 2)
    idx = rng.integers(0, cfg.order_classes, 2)
    w = LossWeights(1.0, 1.0, 1.0)

    def loss():
        cls, _, _ = model(x)
        _, ordl, trace = model(xp)
        return total_loss(cls, y, ordl, idx, trace, orders, w).total

    worst = 0.0
    for name in names or sorted(model.params):
        original = model.params[name]

        def f(t, name=name):
            model.params[name] = t
            try:
                return loss()
            finally:
                model.params[name] = original

        worst = max(worst, finite_diff_check(f, original.data, h=h, coords=coords, rng=rng))
    return CheckResult("model_loss", worst, coords)


def run_suite(points: int = 20, seed: int = 0, coords: int = 6) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = op_suite(points, seed)
    # cosine is the mechanism under test; the softmax baseline gets a lighter sample
    for mode, n in (("cosine", coords), ("softmax", max(2, coords // 2))):
        r = model_loss_check(gradcheck_config(time_mode=mode, space_mode=mode), seed, n)
        results.append(CheckResult(f"model_loss[{mode}]", r.worst, r.points))
    return results, time.perf_counter() - start
