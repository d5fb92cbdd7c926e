"""Text-Fused Former: the shared teacher/student architecture.

text ──Linear──▶ T_proj ──encoder blocks──▶ T'  ─┐ (query)
patches ─Linear─▶ encoder blocks ─────────▶ X'  ─┴ (key/value) ─▶ cross block ─▶ Z
Z ──LayerNorm──▶ mean over rows ──Linear──▶ y

All blocks are pre-norm transformer blocks without positional terms, so the
score is invariant to the order of text rows and of patch rows.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datamodel import FeatureBag

CKPT_MAGIC = b"RASC"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TffConfig:
    d_text_in: int = 768
    d_patch_in: int = 512
    d_model: int = 256
    n_heads: int = 4
    n_qformer_blocks: int = 2
    n_self_blocks: int = 1
    ff_multiplier: int = 4
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by "
                              f"n_heads {self.n_heads}")


@dataclass(frozen=True)
class ForwardOutput:
    y: nc.Tensor
    t_proj: nc.Tensor
    t_refined: nc.Tensor
    z: nc.Tensor

    @property
    def score(self) -> float:
        return self.y.item()


class TffParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: TffConfig, tensors: "OrderedDict[str, nc.Tensor]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> nc.Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors)

    def values(self) -> list:
        return list(self.tensors.values())

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "TffParams":
        return TffParams(self.config, OrderedDict(
            (k, nc.Tensor(v.data.copy(), requires_grad=True)) for k, v in self.tensors.items()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def group(self, prefix: str) -> dict:
        """Sub-dictionary of tensors under ``prefix.`` with the prefix removed."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def equals(self, other: "TffParams") -> bool:
        return (self.config == other.config and self.names() == other.names() and
                all(a.data.tobytes() == b.data.tobytes()
                    for a, b in zip(self.values(), other.values())))


# ------------------------------------------------------------------ init

def parameter_shapes(config: TffConfig) -> "OrderedDict[str, tuple]":
    d = config.d_model
    f = config.ff_multiplier * d
    shapes: "OrderedDict[str, tuple]" = OrderedDict()

    def lin(name, n_in, n_out):
        shapes[f"{name}.W"] = (n_in, n_out)
        shapes[f"{name}.b"] = (n_out,)

    def norm(name):
        shapes[f"{name}.g"] = (d,)
        shapes[f"{name}.b"] = (d,)

    def attn(name):
        for p in ("q", "k", "v", "o"):
            shapes[f"{name}.W{p}"] = (d, d)
            shapes[f"{name}.b{p}"] = (d,)

    def ff(name):
        lin(f"{name}.fc1", d, f)
        lin(f"{name}.fc2", f, d)

    lin("text_proj", config.d_text_in, d)
    lin("patch_proj", config.d_patch_in, d)
    for prefix, count in (("qformer", config.n_qformer_blocks), ("self", config.n_self_blocks)):
        for i in range(count):
            norm(f"{prefix}.{i}.ln1")
            attn(f"{prefix}.{i}.attn")
            norm(f"{prefix}.{i}.ln2")
            ff(f"{prefix}.{i}.ff")
    norm("cross.ln_q")
    norm("cross.ln_kv")
    attn("cross.attn")
    norm("cross.ln2")
    ff("cross.ff")
    norm("final_ln")
    lin("head", d, 1)
    return shapes


def init_params(config: TffConfig) -> TffParams:
    rng = np.random.default_rng(config.seed)
    tensors: "OrderedDict[str, nc.Tensor]" = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if len(shape) == 2:
            value = nc.glorot_uniform(rng, *shape)
        elif leaf == "g":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        tensors[name] = nc.Tensor(value, requires_grad=True)
    return TffParams(config, tensors)


# ------------------------------------------------------------------ forward

def _ln(x, p, name):
    return nc.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _ff(x, p, name):
    h = nc.gelu(nc.linear(x, p[f"{name}.fc1.W"], p[f"{name}.fc1.b"]))
    return nc.linear(h, p[f"{name}.fc2.W"], p[f"{name}.fc2.b"])


def _attn_params(p, name):
    return {k: p[f"{name}.{k}"] for k in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")}


def encoder_block(x, params: TffParams, name: str) -> nc.Tensor:
    h = _ln(x, params, f"{name}.ln1")
    x = nc.add(x, nc.multi_head_attention(h, h, h, _attn_params(params, f"{name}.attn"),
                                          params.config.n_heads))
    return nc.add(x, _ff(_ln(x, params, f"{name}.ln2"), params, f"{name}.ff"))


def cross_block(queries, context, params: TffParams) -> nc.Tensor:
    q = _ln(queries, params, "cross.ln_q")
    kv = _ln(context, params, "cross.ln_kv")
    z = nc.add(queries, nc.multi_head_attention(q, kv, kv, _attn_params(params, "cross.attn"),
                                                params.config.n_heads))
    return nc.add(z, _ff(_ln(z, params, "cross.ln2"), params, "cross.ff"))


def _as_input(x, width: int, what: str) -> nc.Tensor:
    if isinstance(x, FeatureBag):
        x = x.matrix
    if not isinstance(x, nc.Tensor):
        x = nc.Tensor(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"{what} bag must be a non-empty matrix, got shape {x.shape}")
    if x.shape[1] != width:
        raise ValueError(f"{what} bag has width {x.shape[1]}, model expects {width}")
    return x


def project_text(params: TffParams, text) -> nc.Tensor:
    text = _as_input(text, params.config.d_text_in, "text")
    return nc.linear(text, params["text_proj.W"], params["text_proj.b"])


def forward(params: TffParams, text, patches) -> ForwardOutput:
    cfg = params.config
    t_proj = project_text(params, text)
    patches = _as_input(patches, cfg.d_patch_in, "patch")
    t = t_proj
    for i in range(cfg.n_qformer_blocks):
        t = encoder_block(t, params, f"qformer.{i}")
    x = nc.linear(patches, params["patch_proj.W"], params["patch_proj.b"])
    for i in range(cfg.n_self_blocks):
        x = encoder_block(x, params, f"self.{i}")
    z = cross_block(t, x, params)
    pooled = nc.mean_rows(_ln(z, params, "final_ln"))
    y = nc.linear(pooled, params["head.W"], params["head.b"])
    return ForwardOutput(y, t_proj, t, z)


def predict(params: TffParams, text, patches) -> float:
    return forward(params, text, patches).score


# ------------------------------------------------------------------ checkpoints

def encode_checkpoint(params: TffParams) -> bytes:
    cfg = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(cfg)), cfg,
           struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.data.astype("<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes, expected: TffConfig | None = None) -> TffParams:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not a RASC checkpoint")
    off = 4
    try:
        version, cfg_len = struct.unpack_from("<HI", buf, off)
        off += 6
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config = TffConfig(**json.loads(buf[off:off + cfg_len].decode("utf-8")))
        off += cfg_len
        if expected is not None and config != expected:
            diff = [f.name for f in fields(TffConfig)
                    if getattr(config, f.name) != getattr(expected, f.name)]
            raise ConfigError(f"checkpoint config differs in: {', '.join(diff)}")
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors: "OrderedDict[str, nc.Tensor]" = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(buf):
                raise CheckpointError(f"truncated tensor {name!r}")
            data = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            tensors[name] = nc.Tensor(data.astype(np.float64), requires_grad=True)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes in checkpoint")
    shapes = parameter_shapes(config)
    if list(shapes) != list(tensors) or any(shapes[k] != tensors[k].shape for k in shapes):
        raise CheckpointError("checkpoint tensors do not match the embedded config")
    return TffParams(config, tensors)


def save_checkpoint(params: TffParams, path) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def load_checkpoint(path, expected: TffConfig | None = None) -> TffParams:
    return decode_checkpoint(Path(path).read_bytes(), expected)
