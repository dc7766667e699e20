"""Classification, order and self-supervised guided losses, and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor

cross_entropy = tn.cross_entropy


@dataclass
class LossWeights:
    cls: float = 1.0
    ord: float = 1.0
    self_: float = 1.0

    def __post_init__(self):
        for v in (self.cls, self.ord, self.self_):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weights must be finite and nonnegative, got {self}")

    @property
    def needs_permuted_pass(self) -> bool:
        return self.ord > 0 or self.self_ > 0


@dataclass
class LossReport:
    l_cls: Tensor
    l_ord: Tensor
    l_self: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"l_cls": self.l_cls.item(), "l_ord": self.l_ord.item(),
                "l_self": self.l_self.item(), "total": self.total.item()}


def sign_order(rank_a, rank_b) -> int:
    # equal ranks (the diagonal) give -1 as written
    return 1 if rank_a < rank_b else -1


def sign_matrix(orders) -> np.ndarray:
    """``S[..., t, t'] = +1`` if ``o[t] < o[t']`` else ``-1``; orders (..., T)."""
    o = np.asarray(orders)
    return np.where(o[..., :, None] < o[..., None, :], 1.0, -1.0)


def self_supervised_guided(temporal, orders, depth: int | None = None) -> Tensor:
    """Guided loss on temporal attention of a permuted batch.

    ``temporal`` is the per-block list of (B, heads, N, T, T+1) attention
    tensors (or an object with a ``temporal`` attribute); ``orders`` is (B, T)
    or (T,) with ``orders[b, t]`` the original index of the frame at slot t.
    Heads are averaged, class-token keys dropped, and the result is averaged
    over the batch.
    """
    blocks = getattr(temporal, "temporal", temporal)
    if depth is not None and len(blocks) != depth:
        raise ValueError(f"trace has {len(blocks)} blocks, expected {depth}")
    B, _, N, T, _ = blocks[0].shape
    signs = sign_matrix(np.broadcast_to(np.asarray(orders), (B, T)))[:, None]  # (B, 1, T, T)
    total = None
    for a in blocks:
        pairs = a[..., 1:].mean(axis=1)  # (B, N, T, T)
        term = ((1.0 - pairs) * signs.astype(a.dtype)).sum()
        total = term if total is None else total + term
    return total * (1.0 / (len(blocks) * N * T * T * B))


def total_loss(cls_logits, y, ord_logits, i, trace, orders, weights: LossWeights) -> LossReport:
    """Weighted sum; terms with zero weight may pass ``None`` inputs."""
    def zero():
        ref = cls_logits if cls_logits is not None else ord_logits
        return Tensor(np.zeros((), dtype=ref.dtype if ref is not None else np.float64))

    l_cls = cross_entropy(cls_logits, y) if cls_logits is not None else zero()
    l_ord = cross_entropy(ord_logits, i) if ord_logits is not None else zero()
    if trace is not None and weights.self_ > 0:
        l_self = self_supervised_guided(trace, orders)
    elif weights.self_ > 0:
        raise ValueError("self-supervised weight > 0 needs an attention trace")
    else:
        l_self = zero()
    total = l_cls * weights.cls + l_ord * weights.ord + l_self * weights.self_
    return LossReport(l_cls, l_ord, l_self, total)
