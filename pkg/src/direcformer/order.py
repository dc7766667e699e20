"""Frame-order recovery from directed temporal attention, and the OrderAcc metric."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MAX_PATH_NODES = 20
_WARNED: set[str] = set()

# Monte-Carlo mean OrderAcc of a uniformly random order against a uniformly
# random truth, T=8, 10^5 trials, seed 0.  Frozen from
# random_orderacc_baseline(8, 100_000, 0); see tests/test_order.py.
RANDOM_BASELINE_T8 = 47.127375


@dataclass
class RecoveredOrder:
    path: np.ndarray  # slots in predicted chronological order
    order: np.ndarray  # order[path[j]] = j
    path_weight: float


def temporal_adjacency(temporal_attention: np.ndarray, time_mode: str = "cosine") -> np.ndarray:
    """Average last-block temporal attention into a T x T frame graph.

    ``temporal_attention`` is (heads, N, T, T+1) for one clip, column 0 being the
    class-token key.  Heads are averaged first, then spatial sites.
    """
    a = np.asarray(temporal_attention)
    if a.ndim != 4 or a.shape[-1] != a.shape[-2] + 1:
        raise ValueError(f"expected (heads, N, T, T+1) attention, got {a.shape}")
    if time_mode != "cosine" and time_mode not in _WARNED:
        _WARNED.add(time_mode)
        log.warning("temporal adjacency built from %s attention (baseline comparison)", time_mode)
    return a[..., 1:].mean(axis=0).mean(axis=0)


def path_weight(W: np.ndarray, path) -> float:
    total = 0.0
    for u, v in zip(path[:-1], path[1:]):
        total += W[u, v]
    return float(total)


def max_weight_hamiltonian_path(W: np.ndarray) -> RecoveredOrder:
    """Exact maximum-weight directed Hamiltonian path by subset DP.

    ``best[mask, v]`` is the largest weight obtainable by finishing a path that
    has visited ``mask`` and currently sits at ``v``.  The path is then rebuilt
    front to back, always taking the smallest node that attains the optimum, so
    ties resolve to the lexicographically smallest path.  O(2^T T^2).
    """
    W = np.asarray(W, dtype=np.float64)
    T = W.shape[0]
    if W.shape != (T, T):
        raise ValueError(f"adjacency must be square, got {W.shape}")
    if not 2 <= T <= MAX_PATH_NODES:
        raise ValueError(f"T={T} outside 2..{MAX_PATH_NODES}")

    full = (1 << T) - 1
    bits = 1 << np.arange(T)
    best = np.full((1 << T, T), -np.inf)
    best[full] = 0.0
    for mask in range(full - 1, 0, -1):
        inside = (mask & bits) != 0
        outside = ~inside
        ahead = np.full(T, -np.inf)
        ahead[outside] = best[mask | bits[outside], np.flatnonzero(outside)]
        cand = W[inside] + ahead  # (|mask|, T)
        best[mask, inside] = cand.max(axis=1)

    starts = np.array([best[1 << v, v] for v in range(T)])
    v = int(np.flatnonzero(starts == starts.max())[0])
    path = [v]
    mask = 1 << v
    while mask != full:
        target = best[mask, v]
        for u in range(T):
            if mask & (1 << u):
                continue
            if W[v, u] + best[mask | (1 << u), u] == target:
                v = u
                break
        path.append(v)
        mask |= 1 << v

    path = np.array(path)
    order = np.empty(T, dtype=np.int64)
    order[path] = np.arange(T)
    return RecoveredOrder(path, order, path_weight(W, path))


def lcs(a, b) -> int:
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def order_accuracy(recovered, truth) -> float:
    recovered, truth = list(recovered), list(truth)
    if len(recovered) != len(truth):
        raise ValueError(f"order length mismatch: {len(recovered)} vs {len(truth)}")
    return 100.0 * lcs(recovered, truth) / len(truth)


def random_orderacc_baseline(T: int, trials: int = 100_000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(trials):
        total += order_accuracy(rng.permutation(T), rng.permutation(T))
    return total / trials


def recover_order(temporal_attention: np.ndarray, time_mode: str = "cosine") -> RecoveredOrder:
    return max_weight_hamiltonian_path(temporal_adjacency(temporal_attention, time_mode))
