"""Joint classification + order training, evaluation and the attention-mode grid.

Each step draws one catalogue permutation per example, runs the clean clip for
the classification loss and the permuted clip for the order and guided losses,
then takes one adaptive-moment step.  Everything downstream of ``seed`` is
deterministic when BLAS runs single-threaded.
"""
from __future__ import annotations

import contextlib
import hashlib
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .losses import LossWeights, total_loss
from .model import ConfigError, DirecFormer, ModelConfig, load_checkpoint, save_checkpoint
from .order import order_accuracy, recover_order
from .permutations import (PermutationSet, generate_permutation_set, identity_set,
                           load_catalogue, permute_frames)
from .synth import Manifest, center_offset, read_manifest

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "l_cls", "l_ord", "l_self", "total", "lr")
EVAL_COLUMNS = ("epoch", "split", "top1", "top5", "order_top1", "order_acc", "order_acc_uniform")


class TrainingError(RuntimeError):
    pass


# -- threads -------------------------------------------------------------------
@contextlib.contextmanager
def thread_limit(value: str | int | None = None):
    """Cap BLAS threads from ``DIRECFORMER_THREADS`` (0 means strictly one)."""
    value = os.environ.get("DIRECFORMER_THREADS") if value is None else value
    if value is None or value == "":
        yield
        return
    from threadpoolctl import threadpool_limits

    n = max(1, int(value))
    with threadpool_limits(limits=n):
        yield


# -- configuration -------------------------------------------------------------
@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(dtype="float32"))
    data: str = ""  # dataset directory or manifest path
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    cosine_decay: bool = False
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    perm_catalogue: str = ""  # file; empty means generate from the perm_* keys
    perm_count: int = 1000
    perm_seed: int = 0
    perm_objective: str = "min-hamming"
    perm_pool: int = 1000
    protocol: str = "center"
    eval_seed: int = 1234

    def validate(self, check_files: bool = True) -> None:
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be finite and nonnegative, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs >= 0 and batch_size >= 1 required")
        if self.protocol not in ("center", "three-crop"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        self.model.validate()
        if check_files:
            for path in (self.data, self.perm_catalogue):
                if path and not Path(path).exists():
                    raise FileNotFoundError(f"referenced file {path} does not exist")
            if not self.data:
                raise ConfigError("no dataset given (key 'data')")

    def permutation_set(self) -> PermutationSet:
        if self.perm_catalogue:
            return load_catalogue(self.perm_catalogue)
        if self.perm_count == 1:
            return identity_set(self.model.frames)
        return generate_permutation_set(self.model.frames, self.perm_count, self.perm_objective,
                                        self.perm_seed, self.perm_pool)

    # text form: flat key=value, model keys prefixed "model.", weights "lambda_*"
    def to_text(self) -> str:
        lines = [f"model.{k}={v}" for k, v in asdict(self.model).items()]
        lines += [f"lambda_cls={self.weights.cls}", f"lambda_ord={self.weights.ord}",
                  f"lambda_self={self.weights.self_}"]
        for f in fields(self):
            if f.name not in ("model", "weights"):
                lines.append(f"{f.name}={getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        model, weights, rest = {}, {}, {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.startswith("model."):
                model[key[6:]] = value
            elif key in ("lambda_cls", "lambda_ord", "lambda_self"):
                weights[{"lambda_cls": "cls", "lambda_ord": "ord", "lambda_self": "self_"}[key]] = float(value)
            else:
                rest[key] = value
        return cls.from_dict(model, weights, rest)

    @classmethod
    def from_dict(cls, model: dict, weights: dict, rest: dict) -> "TrainConfig":
        base = cls()
        kinds = {f.name: f.type for f in fields(cls) if f.name not in ("model", "weights")}
        kw = {}
        for key, value in rest.items():
            if key not in kinds:
                raise ConfigError(f"unknown training key {key!r}")
            kind = kinds[key]
            if kind == "bool":
                kw[key] = str(value).lower() in ("1", "true", "yes")
            else:
                kw[key] = {"int": int, "float": float}.get(kind, str)(value)
        mpairs = {k: str(v) for k, v in asdict(base.model).items()}
        mpairs.update(model)
        return cls(model=ModelConfig.from_pairs(mpairs), weights=LossWeights(**weights), **kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


# -- optimizer -----------------------------------------------------------------
NO_DECAY = frozenset({"pos_embed"})  # 2-D but not a weight matrix


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
                   state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    """In-place adaptive-moment update with bias correction.

    Weight decay is decoupled and applied to weight matrices only (ndim >= 2,
    minus the positional table), so gains, biases, the class token and the
    positional embeddings are left alone.  Missing gradients count as zero.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and p.ndim >= 2 and name not in NO_DECAY:
            p -= p.dtype.type(lr * weight_decay) * p
        p -= (p.dtype.type(lr) * step).astype(p.dtype, copy=False)
    return state


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if not cfg.cosine_decay or total_steps <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total_steps))


# -- data helpers -------------------------------------------------------------
@dataclass
class SplitData:
    pixels: np.ndarray  # (B, T, H, W, C)
    labels: np.ndarray
    clip_ids: np.ndarray


def load_split(manifest: Manifest, split: str) -> SplitData:
    from .dft import load

    rows = manifest.split(split)
    if not rows:
        raise ConfigError(f"split {split!r} is empty")
    pixels = np.stack([load(manifest.root / r.path) for r in rows])
    return SplitData(pixels, np.array([r.label for r in rows]), np.array([r.clip_id for r in rows]))


def crop_offsets(H: int, W: int, size_h: int, size_w: int, protocol: str) -> list[tuple[int, int]]:
    centre = (center_offset(H, size_h), center_offset(W, size_w))
    if protocol == "center":
        return [centre]
    if protocol == "three-crop":
        return [(0, 0), centre, (H - size_h, W - size_w)]
    raise ConfigError(f"unknown protocol {protocol!r}")


def _fit(pixels: np.ndarray, cfg: ModelConfig, protocol: str) -> list[np.ndarray]:
    """Views of a (B, T, H, W, C) batch matching the model's frame size."""
    _, T, H, W, C = pixels.shape
    if (T, C) != (cfg.frames, cfg.channels) or H < cfg.height or W < cfg.width:
        raise ConfigError(f"data (T={T}, {H}x{W}, C={C}) cannot feed model "
                          f"(T={cfg.frames}, {cfg.height}x{cfg.width}, C={cfg.channels})")
    return [pixels[:, :, y:y + cfg.height, x:x + cfg.width]
            for y, x in crop_offsets(H, W, cfg.height, cfg.width, protocol)]


def batch_hash(clip_ids) -> str:
    return hashlib.sha1(np.asarray(clip_ids, dtype=np.int64).tobytes()).hexdigest()[:12]


def training_permutations(seed: int, epoch: int, positions: np.ndarray, count: int) -> np.ndarray:
    """Catalogue index per example, seeded by (seed, epoch, example position)."""
    return np.array([np.random.default_rng([seed, epoch, int(p), 7]).integers(count)
                     for p in positions], dtype=np.int64)


def evaluation_permutations(eval_seed: int, n: int, perm_set: PermutationSet) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-seed per-clip test permutations.

    Returns (catalogue indices, orders) for permutations drawn from the
    catalogue, the label space the order head was trained on.
    """
    idx = np.random.default_rng(eval_seed).integers(len(perm_set), size=n)
    return idx, perm_set.perms[idx]


def uniform_permutations(eval_seed: int, n: int, T: int) -> np.ndarray:
    rng = np.random.default_rng([eval_seed, 1])
    return np.stack([rng.permutation(T) for _ in range(n)])


# -- evaluation ---------------------------------------------------------------
@dataclass
class EvalReport:
    top1: float
    top5: float
    order_top1: float
    order_acc: float
    order_acc_uniform: float
    confusion: np.ndarray  # (classes, classes) rows = truth, cols = prediction
    n: int
    scores: np.ndarray | None = None  # averaged class probabilities

    def row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in EVAL_COLUMNS[2:]}

    def equals(self, other: "EvalReport") -> bool:
        return (self.row() == other.row() and np.array_equal(self.confusion, other.confusion)
                and (self.scores is None or np.array_equal(self.scores, other.scores)))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _order_pass(model: DirecFormer, view: np.ndarray, orders: np.ndarray, batch_size: int):
    """Order logits and Hamilton-recovered ranks on permuted clips."""
    cfg = model.cfg
    logits, recovered = [], []
    for s in range(0, len(view), batch_size):
        x = permute_frames(view[s:s + batch_size], orders[s:s + batch_size])
        _, ord_logits, trace = model(x)
        logits.append(ord_logits.data)
        last = trace.temporal[-1].data
        recovered.extend(recover_order(last[b], cfg.time_mode).order for b in range(len(x)))
    return np.concatenate(logits), np.stack(recovered)


def evaluate_model(model: DirecFormer, data: SplitData, perm_set: PermutationSet | None,
                   protocol: str = "center", eval_seed: int = 1234, batch_size: int = 32,
                   with_order: bool = True) -> EvalReport:
    cfg = model.cfg
    views = _fit(data.pixels, cfg, protocol)
    n = len(data.labels)
    with tn.no_grad():
        probs = np.zeros((n, cfg.classes))
        for view in views:
            for s in range(0, n, batch_size):
                y, _, _ = model(view[s:s + batch_size])
                probs[s:s + batch_size] += _softmax(y.data.astype(np.float64))
        probs /= len(views)

        ranked = np.argsort(-probs, axis=1, kind="stable")
        top1 = 100.0 * float(np.mean(ranked[:, 0] == data.labels))
        top5 = 100.0 * float(np.mean((ranked[:, :5] == data.labels[:, None]).any(axis=1)))
        confusion = np.zeros((cfg.classes, cfg.classes), dtype=np.int64)
        np.add.at(confusion, (data.labels, ranked[:, 0]), 1)

        order_top1 = order_acc = order_acc_uniform = 0.0
        if with_order and perm_set is not None:
            centre = _fit(data.pixels, cfg, "center")[0]
            idx, orders = evaluation_permutations(eval_seed, n, perm_set)
            logits, recovered = _order_pass(model, centre, orders, batch_size)
            if logits.shape[1] == len(perm_set):
                order_top1 = 100.0 * float(np.mean(logits.argmax(axis=1) == idx))
            order_acc = float(np.mean([order_accuracy(r, o) for r, o in zip(recovered, orders)]))
            uni = uniform_permutations(eval_seed, n, cfg.frames)
            _, rec_u = _order_pass(model, centre, uni, batch_size)
            order_acc_uniform = float(np.mean([order_accuracy(r, o) for r, o in zip(rec_u, uni)]))
    return EvalReport(top1, top5, order_top1, order_acc, order_acc_uniform, confusion, n, probs)


def evaluate(checkpoint, manifest, split: str = "test", protocol: str = "center",
             eval_seed: int | None = None, batch_size: int = 32) -> EvalReport:
    """Evaluate a checkpoint file (or loaded checkpoint) on one split of a dataset."""
    ck = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    perm_set = None
    if "perm_set" in ck.extras:
        perms = ck.extras["perm_set"].astype(np.int64)
        perm_set = PermutationSet(perms, perms.shape[1], int(ck.meta.get("perm_seed", 0)),
                                  ck.meta.get("perm_objective", "min-hamming"),
                                  int(ck.meta.get("perm_pool", 0)))
    seed = int(ck.meta.get("eval_seed", 1234)) if eval_seed is None else eval_seed
    return evaluate_model(ck.model, load_split(manifest, split), perm_set, protocol, seed, batch_size)


# -- training -----------------------------------------------------------------
@dataclass
class TrainResult:
    model: DirecFormer
    best_checkpoint: Path | None
    metrics_path: Path | None
    history: list[dict]  # per-step loss rows
    evals: list[dict]  # per-epoch validation rows
    batch_hashes: list[str]
    perm_set: PermutationSet
    best_epoch: int = -1
    best_top1: float = -1.0
    wall_s: float = 0.0


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in columns) + "\n")


def _diagnostics(model: DirecFormer, trace) -> str:
    parts = []
    if trace is not None:
        for l, a in enumerate(trace.temporal):
            d = a.data
            parts.append(f"block{l} temporal attn min={np.nanmin(d):.3g} max={np.nanmax(d):.3g} "
                         f"nonfinite={int((~np.isfinite(d)).sum())}")
    norms = sorted(((float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0, k)
                    for k, p in model.params.items()), reverse=True)[:5]
    parts.append("largest grad norms: " + ", ".join(f"{k}={g:.3g}" for g, k in norms))
    return "; ".join(parts)


def train(cfg: TrainConfig, out_dir=None, eval_split: str = "val", eval_every: int = 1,
          on_epoch=None) -> TrainResult:
    """Run the seeded training loop.

    ``out_dir`` (optional) receives ``metrics.csv``, ``timing.csv``,
    ``eval.csv``, ``batches.txt``, ``train.cfg`` and ``best.ckpt``.
    ``on_epoch(epoch, report)`` may return True to stop early.
    """
    cfg.validate()
    manifest = read_manifest(cfg.data)
    data = load_split(manifest, "train")
    val = load_split(manifest, eval_split)
    perm_set = cfg.permutation_set()
    if perm_set.T != cfg.model.frames:
        raise ConfigError(f"permutation catalogue T={perm_set.T} but model has {cfg.model.frames} frames")
    mcfg = replace(cfg.model, order_classes=len(perm_set))
    model = DirecFormer(mcfg, seed=cfg.seed)
    train_view = _fit(data.pixels, mcfg, "center")[0]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train.cfg").write_text(cfg.to_text(), encoding="utf-8")

    params = {k: p.data for k, p in model.params.items()}
    state = AdamState()
    n = len(data.labels)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    history, evals, hashes, timing = [], [], [], []
    best = (-1.0, -1)
    best_path = out / "best.ckpt" if out is not None else None
    best_state = None
    start = time.perf_counter()
    step = 0
    meta_base = {"seed": cfg.seed, "eval_seed": cfg.eval_seed, "perm_seed": perm_set.seed,
                 "perm_objective": perm_set.objective, "perm_pool": perm_set.pool}

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for s in range(0, n, cfg.batch_size):
            t0 = time.perf_counter()
            pos = order[s:s + cfg.batch_size]
            hashes.append(batch_hash(data.clip_ids[pos]))
            x, y = train_view[pos], data.labels[pos]
            w = cfg.weights
            cls_logits = ord_logits = trace = None
            idx = orders = None
            if w.cls > 0:
                cls_logits, _, _ = model(x)
            if w.needs_permuted_pass:
                idx = training_permutations(cfg.seed, epoch, pos, len(perm_set))
                orders = perm_set.perms[idx]
                _, ord_logits, trace = model(permute_frames(x, orders))
                if w.ord == 0:
                    ord_logits = None
            if cls_logits is None and ord_logits is None and trace is None:
                raise ConfigError("all loss weights are zero")
            report = total_loss(cls_logits, y, ord_logits, idx, trace, orders, w)
            lr = learning_rate(cfg, step, total_steps)
            values = report.values()
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}: {values}; "
                                    + _diagnostics(model, trace))
            model.zero_grad()
            tn.backward(report.total)
            optimizer_step(params, {k: p.grad for k, p in model.params.items()}, state, lr,
                           cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            history.append({"step": step, **values, "lr": lr})
            timing.append({"step": step, "wall_ms": round(1000 * (time.perf_counter() - t0), 3)})
            step += 1

        report = None
        if (epoch + 1) % eval_every == 0 or epoch == cfg.epochs - 1:
            report = evaluate_model(model, val, perm_set, cfg.protocol, cfg.eval_seed, cfg.batch_size)
            evals.append({"epoch": epoch, "split": eval_split, **report.row()})
            log.info("epoch %d %s top1=%.2f order_top1=%.2f order_acc=%.2f loss=%.4f",
                     epoch, eval_split, report.top1, report.order_top1, report.order_acc,
                     history[-1]["total"] if history else float("nan"))
            if report.top1 > best[0]:
                best = (report.top1, epoch)
                best_state = model.state()
                if best_path is not None:
                    save_checkpoint(best_path, model, {**meta_base, "epoch": epoch, "val_top1": report.top1},
                                    {"perm_set": perm_set.perms})
        if out is not None:
            _write_csv(out / "metrics.csv", METRIC_COLUMNS, history)
            _write_csv(out / "timing.csv", ("step", "wall_ms"), timing)
            _write_csv(out / "eval.csv", EVAL_COLUMNS, evals)
            (out / "batches.txt").write_text("\n".join(hashes) + "\n", encoding="utf-8")
        if on_epoch is not None and report is not None and on_epoch(epoch, report):
            break

    if best_state is not None:
        model = DirecFormer(mcfg, best_state)
    return TrainResult(model, best_path, out / "metrics.csv" if out is not None else None,
                       history, evals, hashes, perm_set, best[1], best[0],
                       time.perf_counter() - start)


# -- ablation grid -----------------------------------------------------------
MODE_CELLS = (("softmax", "softmax"), ("softmax", "cosine"), ("cosine", "softmax"), ("cosine", "cosine"))

# attention cells x loss variants in the comparison table layout:
# (time_mode, space_mode, lambda_ord, lambda_self)
TABLE1_ROWS = (
    ("softmax", "cosine", 0.0, 0.0),
    ("softmax", "cosine", 1.0, 0.0),
    ("cosine", "softmax", 0.0, 0.0),
    ("cosine", "softmax", 1.0, 0.0),
    ("cosine", "softmax", 1.0, 1.0),
    ("cosine", "cosine", 0.0, 0.0),
    ("cosine", "cosine", 1.0, 0.0),
    ("cosine", "cosine", 1.0, 1.0),
)


def grid_rows(modes=MODE_CELLS, loss_variants: bool = False) -> list[tuple[str, str, float, float]]:
    """Cells to train.  With ``loss_variants`` each mode gets L_ord off/on and,
    given L_ord, L_self off/on; cells whose time stage is softmax skip L_self
    since the guided loss assumes signed attention.
    """
    rows = []
    for t, s in modes:
        if not loss_variants:
            rows.append((t, s, 0.0, 0.0))
            continue
        rows.append((t, s, 0.0, 0.0))
        rows.append((t, s, 1.0, 0.0))
        if t == "cosine":
            rows.append((t, s, 1.0, 1.0))
    return rows


@dataclass
class GridRow:
    time_mode: str
    space_mode: str
    lambda_ord: float
    lambda_self: float
    report: EvalReport
    batch_hashes: list[str]

    @property
    def cell(self) -> str:
        return f"{self.time_mode[0].upper()}-{self.space_mode[0].upper()}"


def ablation_grid(base: TrainConfig, rows=None, out_dir=None, split: str = "test") -> list[GridRow]:
    """Train every (time, space, lambda_ord, lambda_self) row with the base seed
    and data, then evaluate each best checkpoint on ``split``."""
    rows = grid_rows() if rows is None else rows
    results = []
    manifest = read_manifest(base.data)
    test = load_split(manifest, split)
    for t, s, lo, ls in rows:
        cfg = replace(base, model=replace(base.model, time_mode=t, space_mode=s),
                      weights=LossWeights(base.weights.cls, lo, ls))
        sub = None if out_dir is None else Path(out_dir) / f"{t[0]}{s[0]}_ord{lo:g}_self{ls:g}"
        res = train(cfg, sub)
        report = evaluate_model(res.model, test, res.perm_set, cfg.protocol, cfg.eval_seed, cfg.batch_size)
        results.append(GridRow(t, s, lo, ls, report, res.batch_hashes))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "table.txt").write_text(format_table(results), encoding="utf-8")
    return results


def format_table(rows: list[GridRow]) -> str:
    head = f"{'cell':<5} {'L_ord':>5} {'L_self':>6} {'top1':>7} {'top5':>7} {'ord_top1':>8} {'OrderAcc':>8}"
    lines = [head]
    for r in rows:
        lines.append(f"{r.cell:<5} {'x' if r.lambda_ord else '-':>5} {'x' if r.lambda_self else '-':>6} "
                     f"{r.report.top1:7.2f} {r.report.top5:7.2f} {r.report.order_top1:8.2f} "
                     f"{r.report.order_acc:8.2f}")
    return "\n".join(lines) + "\n"
