"""Surface transformer encoder: patch sequence [B, S, M, F] -> embeddings
[B, S, D].

Pre-norm blocks (multi-head self-attention + GELU MLP, residual connections),
learned absolute positional embeddings, no class token -- every patch
embedding is consumed by the decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, TensorError


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 48            # D
    depth: int = 4           # transformer blocks L
    heads: int = 6
    mlp_ratio: int = 4
    dropout: float = 0.1
    seq_len: int = 80        # N_total = H * N
    patch_size: int = 45     # M
    channels: int = 3        # F

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("attention heads must divide the latent dim")
        for name in ("dim", "depth", "heads", "mlp_ratio", "seq_len",
                     "patch_size", "channels"):
            if getattr(self, name) < (0 if name == "depth" else 1):
                raise ValueError(f"encoder config: {name} out of range")


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


def init_params(config: EncoderConfig, seed: int) -> dict:
    """Named parameter dict; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    d, mf = config.dim, config.patch_size * config.channels
    p = {}

    def weight(name, shape):
        p[name] = Tensor(_trunc_normal(rng, shape), requires_grad=True)

    def zeros(name, shape):
        p[name] = Tensor(np.zeros(shape, np.float32), requires_grad=True)

    def ones(name, shape):
        p[name] = Tensor(np.ones(shape, np.float32), requires_grad=True)

    weight("patch_proj.w", (mf, d))
    zeros("patch_proj.b", (d,))
    p["pos_emb"] = Tensor(
        rng.normal(0.0, 0.02, size=(config.seq_len, d)).astype(np.float32),
        requires_grad=True)
    for i in range(config.depth):
        pre = f"block{i}."
        ones(pre + "norm1.g", (d,)); zeros(pre + "norm1.b", (d,))
        weight(pre + "attn.wq", (d, d)); zeros(pre + "attn.bq", (d,))
        weight(pre + "attn.wk", (d, d)); zeros(pre + "attn.bk", (d,))
        weight(pre + "attn.wv", (d, d)); zeros(pre + "attn.bv", (d,))
        weight(pre + "attn.wo", (d, d)); zeros(pre + "attn.bo", (d,))
        ones(pre + "norm2.g", (d,)); zeros(pre + "norm2.b", (d,))
        weight(pre + "mlp.w1", (d, d * config.mlp_ratio))
        zeros(pre + "mlp.b1", (d * config.mlp_ratio,))
        weight(pre + "mlp.w2", (d * config.mlp_ratio, d))
        zeros(pre + "mlp.b2", (d,))
    ones("final_norm.g", (d,)); zeros("final_norm.b", (d,))
    return p


def _dropout(x: Tensor, p: float, training: bool,
             rng: np.random.Generator | None) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise TensorError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x.mul(Tensor(keep, dtype=x.data.dtype))


def _attention(x: Tensor, params: dict, pre: str, config: EncoderConfig,
               training: bool, rng) -> Tensor:
    b, s, d = x.shape
    h = config.heads
    dh = d // h

    def project(name):
        y = x.matmul(params[pre + f"attn.w{name}"]).add(
            params[pre + f"attn.b{name}"])
        return y.reshape(b, s, h, dh).transpose((0, 2, 1, 3))  # B,h,S,dh

    q, k, v = project("q"), project("k"), project("v")
    scores = q.matmul(k.transpose((0, 1, 3, 2))).mul(1.0 / math.sqrt(dh))
    attn = scores.softmax(axis=-1)
    attn = _dropout(attn, config.dropout, training, rng)
    ctx = attn.matmul(v).transpose((0, 2, 1, 3)).reshape(b, s, d)
    out = ctx.matmul(params[pre + "attn.wo"]).add(params[pre + "attn.bo"])
    return _dropout(out, config.dropout, training, rng)


def _mlp(x: Tensor, params: dict, pre: str, config: EncoderConfig,
         training: bool, rng) -> Tensor:
    y = x.matmul(params[pre + "mlp.w1"]).add(params[pre + "mlp.b1"]).gelu()
    y = _dropout(y, config.dropout, training, rng)
    y = y.matmul(params[pre + "mlp.w2"]).add(params[pre + "mlp.b2"])
    return _dropout(y, config.dropout, training, rng)


def encode(patches: Tensor, params: dict, config: EncoderConfig,
           training: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    """f_SiT over a [B, S, M, F] batch; returns [B, S, D]."""
    b, s, m, f = patches.shape
    if s != config.seq_len or m != config.patch_size or f != config.channels:
        raise TensorError(
            f"encode: got patches {patches.shape}, config expects "
            f"[B, {config.seq_len}, {config.patch_size}, {config.channels}]")
    x = patches.reshape(b, s, m * f)
    x = x.matmul(params["patch_proj.w"]).add(params["patch_proj.b"])
    x = x.add(params["pos_emb"])
    x = _dropout(x, config.dropout, training, rng)
    for i in range(config.depth):
        pre = f"block{i}."
        try:
            normed = x.layernorm(params[pre + "norm1.g"],
                                 params[pre + "norm1.b"])
            x = x.add(_attention(normed, params, pre, config, training, rng))
            normed = x.layernorm(params[pre + "norm2.g"],
                                 params[pre + "norm2.b"])
            x = x.add(_mlp(normed, params, pre, config, training, rng))
        except TensorError as e:
            raise TensorError(f"encoder block {i}: {e}") from e
    return x.layernorm(params["final_norm.g"], params["final_norm.b"])
