"""Frame-permutation catalogue for the order-prediction task.

Permutations are 0-based numpy int arrays here: ``o[t]`` is the original
(chronological) index of the frame placed at slot ``t``.  Catalogue files store
1-based ranks.
"""
from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np

OBJECTIVES = ("min-hamming", "max-hamming")


def hamming(o1, o2) -> int:
    o1, o2 = np.asarray(o1), np.asarray(o2)
    if o1.shape != o2.shape:
        raise ValueError(f"hamming: length mismatch {o1.shape} vs {o2.shape}")
    return int(np.count_nonzero(o1 != o2))


def inverse(o) -> np.ndarray:
    o = np.asarray(o)
    inv = np.empty_like(o)
    inv[o] = np.arange(len(o))
    return inv


def is_permutation(o) -> bool:
    o = np.asarray(o)
    return o.ndim == 1 and np.array_equal(np.sort(o), np.arange(len(o)))


@dataclass
class PermutationSet:
    perms: np.ndarray  # (count, T)
    T: int
    seed: int
    objective: str = "min-hamming"
    pool: int = 1000
    _lookup: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.perms = np.asarray(self.perms, dtype=np.int64)
        self._lookup = {tuple(p): i for i, p in enumerate(self.perms.tolist())}
        if len(self._lookup) != len(self.perms):
            raise ValueError("permutation set contains duplicates")

    def __len__(self) -> int:
        return len(self.perms)

    def __getitem__(self, i) -> "PermutationSpec":
        return PermutationSpec(self.perms[i].copy(), int(i))

    def index(self, order) -> int:
        key = tuple(int(v) for v in np.asarray(order))
        if key not in self._lookup:
            raise KeyError(f"permutation {key} is not in the catalogue")
        return self._lookup[key]

    def header(self) -> str:
        return (f"T={self.T} count={len(self)} seed={self.seed} "
                f"objective={self.objective} pool={self.pool}")


@dataclass
class PermutationSpec:
    order: np.ndarray
    set_index: int = -1


def _full_pool(T: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(T))), dtype=np.int64)


def generate_permutation_set(T: int, count: int, objective: str = "min-hamming", seed: int = 0,
                             pool: int = 1000, first=None) -> PermutationSet:
    """Greedy catalogue construction.

    Starting from one seeded random permutation (or ``first``), each step draws
    ``pool`` random candidates and admits the one whose summed Hamming distance
    to the chosen set is smallest (``min-hamming``) or largest
    (``max-hamming``).  When ``pool >= T!`` every unused permutation is a
    candidate.  The summed distance is computed from per-slot value counts, so
    a step costs O(pool * T).
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    if T < 1 or T > 12:
        raise ValueError(f"T={T} outside the supported range 1..12")
    total = math.factorial(T)
    if count < 1 or count > total:
        raise ValueError(f"count={count} must be in 1..{total} for T={T}")

    rng = np.random.default_rng(seed)
    exhaustive = pool >= total
    everything = _full_pool(T) if exhaustive else None

    start = rng.permutation(T) if first is None else np.asarray(first, dtype=np.int64)
    if not is_permutation(start) or len(start) != T:
        raise ValueError(f"first={first} is not a permutation of length {T}")
    chosen = [start]
    seen = {tuple(start.tolist())}
    counts = np.zeros((T, T), dtype=np.int64)  # counts[slot, value]
    counts[np.arange(T), start] += 1
    slots = np.arange(T)

    while len(chosen) < count:
        if exhaustive:
            cand = everything
        else:
            cand = np.argsort(rng.random((pool, T)), axis=1)
        fresh = np.array([tuple(c) not in seen for c in cand.tolist()])
        if not fresh.any():
            continue
        agreement = counts[slots, cand].sum(axis=1)  # matches with chosen set
        dist = len(chosen) * T - agreement
        dist = np.where(fresh, dist, np.iinfo(np.int64).max if objective == "min-hamming" else -1)
        pick = int(np.argmin(dist) if objective == "min-hamming" else np.argmax(dist))
        perm = cand[pick].copy()
        chosen.append(perm)
        seen.add(tuple(perm.tolist()))
        counts[slots, perm] += 1

    return PermutationSet(np.stack(chosen), T=T, seed=seed, objective=objective, pool=pool)


def identity_set(T: int) -> PermutationSet:
    return PermutationSet(np.arange(T)[None, :], T=T, seed=0, objective="min-hamming", pool=1)


def apply_permutation(clip, spec: PermutationSpec):
    """Reorder frames: output slot ``t`` holds input frame ``spec.order[t]``."""
    from .synth import VideoClip

    order = np.asarray(spec.order)
    if len(order) != clip.pixels.shape[0]:
        raise ValueError(f"permutation length {len(order)} != clip length {clip.pixels.shape[0]}")
    return VideoClip(clip.pixels[order], clip.label, spec, clip.clip_id)


def permute_frames(pixels: np.ndarray, orders: np.ndarray) -> np.ndarray:
    """Batched frame reorder: pixels (B, T, ...), orders (B, T)."""
    rows = np.arange(pixels.shape[0])[:, None]
    return pixels[rows, orders]


def order_target(spec: PermutationSpec, perm_set: PermutationSet) -> int:
    idx = perm_set.index(spec.order)
    if spec.set_index not in (-1, idx):
        raise ValueError(f"set_index {spec.set_index} disagrees with catalogue position {idx}")
    return idx


def save_catalogue(path: str | os.PathLike, perm_set: PermutationSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(perm_set.header() + "\n")
        for p in perm_set.perms:
            fh.write(" ".join(str(v + 1) for v in p) + "\n")


def load_catalogue(path: str | os.PathLike) -> PermutationSet:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty catalogue")
    meta = dict(tok.split("=", 1) for tok in lines[0].split())
    perms = np.array([[int(v) - 1 for v in ln.split()] for ln in lines[1:] if ln.strip()],
                     dtype=np.int64)
    T = int(meta["T"])
    if perms.shape != (int(meta["count"]), T):
        raise ValueError(f"{path}: header says {meta['count']}x{T}, found {perms.shape}")
    for p in perms:
        if not is_permutation(p):
            raise ValueError(f"{path}: invalid permutation {p + 1}")
    return PermutationSet(perms, T=T, seed=int(meta["seed"]), objective=meta["objective"],
                          pool=int(meta["pool"]))
