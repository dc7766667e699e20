"""Divided space-time transformer with directed (cosine) attention.

Token layout for a clip with T frames of N patches: index 0 is the class
token, patch ``s`` of frame ``t`` sits at ``1 + t * N + s``.

Each block runs a temporal stage (every patch token attends over the class
token and the same site in all frames), then a spatial stage (every patch
token attends over the class token and all sites of its own frame; the class
token attends over everything), then a pre-norm MLP.  Attention weights are
either signed cosine similarities (``cosine``) or the softmax baseline.
"""
from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import dft
from . import tensor as tn
from .tensor import Tensor

MODES = ("softmax", "cosine")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    depth: int = 2
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    patch: int = 8
    dim: int = 64
    heads: int = 4
    mlp_hidden: int = 128
    classes: int = 8
    order_classes: int = 1000
    time_mode: str = "cosine"
    space_mode: str = "cosine"
    ln_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide frame {self.height}x{self.width}")
        if self.dim % self.heads:
            raise ConfigError(f"heads {self.heads} does not divide dim {self.dim}")
        for m in (self.time_mode, self.space_mode):
            if m not in MODES:
                raise ConfigError(f"attention mode {m!r} not in {MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype {self.dtype!r}")
        if min(self.depth, self.frames, self.channels, self.classes, self.order_classes) < 1:
            raise ConfigError("depth, frames, channels and class counts must be positive")

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def cell(self) -> str:
        return f"{self.time_mode[0].upper()}-{self.space_mode[0].upper()}"

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_pairs(cls, pairs: dict) -> "ModelConfig":
        casts = {f.name: {"int": int, "float": float}.get(f.type, str) for f in fields(cls)}
        unknown = set(pairs) - set(casts)
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)}")
        return cls(**{k: casts[k](v) for k, v in pairs.items()})

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        pairs = dict(ln.split("=", 1) for ln in text.splitlines() if ln.strip())
        return cls.from_pairs({k.strip(): v.strip() for k, v in pairs.items()})

    @classmethod
    def paper_scale(cls, **kw) -> "ModelConfig":
        base = dict(depth=12, frames=8, height=224, width=224, channels=3, patch=16, dim=768,
                    heads=12, mlp_hidden=3072, classes=27, order_classes=1000)
        base.update(kw)
        return cls(**base)


@dataclass
class AttentionTrace:
    """Raw attention weights per block.

    temporal[l]: (B, heads, N, T, T+1), key 0 is the class token.
    spatial[l]: (B, heads, T, N, N+1), key 0 is the class token.
    spatial_cls[l]: (B, heads, 1, 1+N*T), the class token's query row.
    """
    temporal: list
    spatial: list
    spatial_cls: list

    @property
    def depth(self) -> int:
        return len(self.temporal)

    def temporal_array(self, block: int = -1, clip: int = 0) -> np.ndarray:
        return self.temporal[block].data[clip]


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(..., T, H, W, C) -> (..., T, N, P*P*C), raster patch order, channels last."""
    *lead, T, H, W, C = pixels.shape
    if H % patch or W % patch:
        raise ConfigError(f"patch {patch} does not divide frame {H}x{W}")
    gh, gw = H // patch, W // patch
    x = pixels.reshape(*lead, T, gh, patch, gw, patch, C)
    k = len(lead)
    axes = tuple(range(k)) + tuple(k + a for a in (0, 1, 3, 2, 4, 5))
    return x.transpose(axes).reshape(*lead, T, gh * gw, patch * patch * C)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(bad.sum())
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D, H = cfg.dim, cfg.mlp_hidden
    p: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out, zero=False):
        p[f"{name}.weight"] = np.zeros((fan_in, fan_out)) if zero else _trunc_normal(rng, (fan_in, fan_out))
        p[f"{name}.bias"] = np.zeros(fan_out)

    def norm(name, width):
        p[f"{name}.gain"] = np.ones(width)
        p[f"{name}.bias"] = np.zeros(width)

    lin("patch_embed", cfg.patch_dim, D)
    p["pos_embed"] = np.zeros((cfg.num_patches * cfg.frames + 1, D))
    p["cls_token"] = _trunc_normal(rng, (D,))
    for l in range(cfg.depth):
        for stage in ("time", "space"):
            for role in "qkv":
                norm(f"blocks.{l}.{stage}.{role}.ln", D)
                lin(f"blocks.{l}.{stage}.{role}", D, D)
            lin(f"blocks.{l}.{stage}.out", D, D, zero=True)
        norm(f"blocks.{l}.mlp.ln", D)
        lin(f"blocks.{l}.mlp.fc1", D, H)
        lin(f"blocks.{l}.mlp.fc2", H, D)
    for head, width in (("head_cls", cfg.classes), ("head_ord", cfg.order_classes)):
        norm(f"{head}.ln", D)
        lin(head, D, width)
    return {k: v.astype(cfg.dtype) for k, v in p.items()}


def attention_weights(q: Tensor, k: Tensor, mode: str, head_dim: int) -> Tensor:
    """Weights of queries (..., m, d) over keys (..., n, d)."""
    scale = 1.0 / np.sqrt(head_dim)
    if mode == "cosine":
        return tn.cosine_rows(q * scale, k)
    if mode == "softmax":
        return tn.softmax_rows(tn.matmul(q, k.swapaxes(-1, -2)) * scale)
    raise ConfigError(f"unknown attention mode {mode!r}")


class DirecFormer:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        raw = init_params(cfg, seed) if params is None else params
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(v, dtype=cfg.dtype), requires_grad=True) for k, v in raw.items()}

    # -- helpers ----------------------------------------------------------------
    def _norm_linear(self, z: Tensor, norm: str, lin: str, xhat: Tensor | None = None) -> Tensor:
        p = self.params
        return tn.norm_linear(z, p[f"{norm}.gain"], p[f"{norm}.bias"], p[f"{lin}.weight"],
                              p[f"{lin}.bias"], self.cfg.ln_eps, xhat=xhat)

    def _qkv(self, z: Tensor, prefix: str, mode: str):
        """Per-head q, k, v as (B, h, 1+TN, d); q and k are pre-scaled/normalized
        so that attention weights are a plain product (cosine) or a softmax of one.
        """
        c = self.cfg
        B, L = z.shape[0], z.shape[1]
        xhat = tn.standardize(z, c.ln_eps)  # shared by the three projections
        q, k, v = (self._norm_linear(z, f"{prefix}.{r}.ln", f"{prefix}.{r}", xhat)
                   .reshape(B, L, c.heads, c.head_dim).transpose(0, 2, 1, 3) for r in "qkv")
        q = q * (1.0 / np.sqrt(c.head_dim))
        if mode == "cosine":
            q, k = tn.l2_normalize(q), tn.l2_normalize(k)
        return q, k, v

    @staticmethod
    def _weights(q: Tensor, keys: Tensor, mode: str) -> Tensor:
        scores = tn.matmul(q, keys.swapaxes(-1, -2))
        return scores if mode == "cosine" else tn.softmax_rows(scores)

    def _patches(self, x: Tensor) -> Tensor:
        """(B, h, 1+TN, d) -> patch part as (B, h, T, N, d)."""
        c = self.cfg
        return x[:, :, 1:].reshape(x.shape[0], c.heads, c.frames, c.num_patches, c.head_dim)

    # -- network stages ---------------------------------------------------------
    def embed(self, tokens: np.ndarray) -> Tensor:
        """(B, T, N, patch_dim) patch vectors -> (B, 1 + N*T, D) initial tokens."""
        c = self.cfg
        B = tokens.shape[0]
        x = Tensor(tokens.reshape(B, c.frames * c.num_patches, c.patch_dim), dtype=c.dtype)
        pos = self.params["pos_embed"]
        patches = tn.linear(x, self.params["patch_embed.weight"], self.params["patch_embed.bias"]) + pos[1:]
        cls = (self.params["cls_token"] + pos[0]).reshape(1, 1, c.dim)
        return tn.concat([tn.broadcast_to(cls, (B, 1, c.dim)), patches], axis=1)

    def temporal_attention(self, z: Tensor, l: int):
        """Each patch token attends over the class key and its own site across frames."""
        c = self.cfg
        B, T, N, h, d = z.shape[0], c.frames, c.num_patches, c.heads, c.head_dim
        pre = f"blocks.{l}.time"
        q, k, v = self._qkv(z, pre, c.time_mode)
        by_site = (0, 1, 3, 2, 4)  # (B, h, T, N, d) -> (B, h, N, T, d)
        q_p = self._patches(q).transpose(by_site)
        keys = tn.concat([tn.broadcast_to(k[:, :, :1].reshape(B, h, 1, 1, d), (B, h, N, 1, d)),
                          self._patches(k).transpose(by_site)], axis=3)
        vals = tn.concat([tn.broadcast_to(v[:, :, :1].reshape(B, h, 1, 1, d), (B, h, N, 1, d)),
                          self._patches(v).transpose(by_site)], axis=3)
        a = self._weights(q_p, keys, c.time_mode)  # (B, h, N, T, T+1)
        s = tn.matmul(a, vals).transpose(0, 3, 2, 1, 4).reshape(B, T * N, c.dim)
        upd = tn.linear(s, self.params[f"{pre}.out.weight"], self.params[f"{pre}.out.bias"])
        return tn.concat([z[:, :1], z[:, 1:] + upd], axis=1), a

    def spatial_attention(self, z: Tensor, l: int):
        """Patch tokens attend over the class key and their own frame; the class
        token attends over every token."""
        c = self.cfg
        B, T, N, h, d = z.shape[0], c.frames, c.num_patches, c.heads, c.head_dim
        pre = f"blocks.{l}.space"
        q, k, v = self._qkv(z, pre, c.space_mode)
        keys = tn.concat([tn.broadcast_to(k[:, :, :1].reshape(B, h, 1, 1, d), (B, h, T, 1, d)),
                          self._patches(k)], axis=3)
        vals = tn.concat([tn.broadcast_to(v[:, :, :1].reshape(B, h, 1, 1, d), (B, h, T, 1, d)),
                          self._patches(v)], axis=3)
        a = self._weights(self._patches(q), keys, c.space_mode)  # (B, h, T, N, N+1)
        s = tn.matmul(a, vals).transpose(0, 2, 3, 1, 4).reshape(B, T * N, c.dim)

        a_cls = self._weights(q[:, :, :1], k, c.space_mode)  # (B, h, 1, 1+TN)
        s_cls = tn.matmul(a_cls, v).transpose(0, 2, 1, 3).reshape(B, 1, c.dim)

        s_all = tn.concat([s_cls, s], axis=1)
        upd = tn.linear(s_all, self.params[f"{pre}.out.weight"], self.params[f"{pre}.out.bias"])
        return z + upd, a, a_cls

    def mlp(self, z: Tensor, l: int) -> Tensor:
        pre = f"blocks.{l}.mlp"
        hidden = tn.gelu(self._norm_linear(z, f"{pre}.ln", f"{pre}.fc1"))
        return z + tn.linear(hidden, self.params[f"{pre}.fc2.weight"], self.params[f"{pre}.fc2.bias"])

    def block(self, z: Tensor, l: int, trace: AttentionTrace | None = None) -> Tensor:
        z, a_t = self.temporal_attention(z, l)
        z, a_s, a_c = self.spatial_attention(z, l)
        if trace is not None:
            trace.temporal.append(a_t)
            trace.spatial.append(a_s)
            trace.spatial_cls.append(a_c)
        return self.mlp(z, l)

    def encode(self, pixels: np.ndarray):
        c = self.cfg
        if pixels.shape[1:] != (c.frames, c.height, c.width, c.channels):
            raise ConfigError(f"clip shape {pixels.shape[1:]} does not match config "
                              f"{(c.frames, c.height, c.width, c.channels)}")
        z = self.embed(patchify(np.asarray(pixels, dtype=c.dtype), c.patch))
        trace = AttentionTrace([], [], [])
        for l in range(c.depth):
            z = self.block(z, l, trace)
        return z, trace

    def heads(self, z: Tensor):
        cls = z[:, 0]
        return (self._norm_linear(cls, "head_cls.ln", "head_cls"),
                self._norm_linear(cls, "head_ord.ln", "head_ord"))

    def forward(self, x):
        """Class logits, order logits and attention trace.

        ``x`` is a (B, T, H, W, C) array or a single clip object with a
        ``pixels`` attribute (then logits come back unbatched).
        """
        single = hasattr(x, "pixels")
        pixels = x.pixels[None] if single else np.asarray(x)
        z, trace = self.encode(pixels)
        y, i = self.heads(z)
        if single:
            y, i = y[0], i[0]
        return y, i, trace

    __call__ = forward

    # -- parameters ---------------------------------------------------------------
    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


# -- checkpoint container --------------------------------------------------------
CKPT_MAGIC = b"DFCK"


@dataclass
class Checkpoint:
    model: DirecFormer
    meta: dict
    extras: dict


def save_checkpoint(path, model: DirecFormer, meta: dict | None = None,
                    extras: dict[str, np.ndarray] | None = None) -> None:
    """Text header (config, meta, name -> offset index) followed by DFT1 blobs.

    ``extras`` are non-parameter arrays stored under ``extra.<name>``.
    """
    entries = list(model.params.items()) + [(f"extra.{k}", v) for k, v in (extras or {}).items()]
    blobs, index, offset = [], [], 0
    for name, p in entries:
        blob = dft.encode(p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64))
        index.append(f"{name} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    header = "[config]\n" + model.cfg.to_text()
    header += "[meta]\n" + "".join(f"{k}={v}\n" for k, v in (meta or {}).items())
    header += "[index]\n" + "\n".join(index) + "\n"
    raw = header.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(raw)) + raw)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise dft.DFTFormatError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<I", buf[4:8])
    header = buf[8:8 + n].decode("utf-8")
    body = buf[8 + n:]
    sections: dict[str, list[str]] = {}
    current = None
    for line in header.splitlines():
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif line.strip():
            sections[current].append(line)
    cfg = ModelConfig.from_text("\n".join(sections["config"]))
    meta = dict(ln.split("=", 1) for ln in sections.get("meta", []))
    params, extras = {}, {}
    for line in sections["index"]:
        name, off, size = line.rsplit(" ", 2)
        arr = dft.read_from(io.BytesIO(body[int(off):int(off) + int(size)]))
        if name.startswith("extra."):
            extras[name[len("extra."):]] = arr
        else:
            params[name] = arr
    return Checkpoint(DirecFormer(cfg, params), meta, extras)
