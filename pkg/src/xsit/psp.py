"""Prototypical surface patch decoder.

Class probability = sum_i w_i * cos(relu(x_i), relu(xi_i)) where xi is one
learnable prototype embedding per patch position and w is a sparse simplex
weighting: softmax weights with below-average entries (< 1/N) zeroed and the
survivors renormalized. Prototypes are periodically replaced by the most
similar real training patch at the same position, which is what makes the
decoder's reasoning case-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import surface as surf
from .tensor import Tensor, TensorError


@dataclass
class PrototypeBank:
    xi: Tensor                     # N_total x D, learnable
    provenance: list = field(default_factory=list)  # per patch: None or (subject_id, epoch)

    @classmethod
    def init(cls, n_patches: int, dim: int, seed: int) -> "PrototypeBank":
        rng = np.random.default_rng(seed)
        xi = Tensor(rng.normal(0.0, 0.02, size=(n_patches, dim))
                    .astype(np.float32), requires_grad=True)
        return cls(xi=xi, provenance=[None] * n_patches)


@dataclass
class SparseScaler:
    logits: Tensor                 # N_total, learnable

    @classmethod
    def init(cls, n_patches: int) -> "SparseScaler":
        return cls(logits=Tensor(np.zeros(n_patches, np.float32),
                                 requires_grad=True))

    def dense_weights(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max()
        e = np.exp(z)
        return e / e.sum()


def rectified_cosine(x: Tensor, xi: Tensor,
                     rectify_prototypes: bool = True) -> Tensor:
    """cos(relu(x), relu(xi)) over the last axis; in [0, 1], zero when either
    rectified vector vanishes."""
    return x.rect_cosine(xi, rectify_proto=rectify_prototypes)


def sparse_weights(logits: Tensor) -> Tensor:
    """Dense softmax weights, hard-thresholded at the uniform level 1/N and
    renormalized. The survival mask is a constant for differentiation."""
    n = logits.shape[-1]
    dense = logits.softmax(axis=-1)
    mask = (dense.data >= 1.0 / n).astype(dense.data.dtype)
    kept = dense.mul(Tensor(mask, dtype=dense.data.dtype))
    return kept.div(kept.sum())


def class_probability(x: Tensor, bank: PrototypeBank,
                      scaler: SparseScaler,
                      rectify_prototypes: bool = True) -> Tensor:
    """P(c|x) for x of shape [N, D] or [B, N, D]; returns scalar or [B]."""
    if x.shape[-2:] != bank.xi.shape:
        raise TensorError(
            f"class_probability: embeddings {x.shape} vs prototypes "
            f"{bank.xi.shape}")
    cos = rectified_cosine(x, bank.xi, rectify_prototypes)  # [..., N]
    w = sparse_weights(scaler.logits)             # [N]
    return cos.mul(w).sum(axis=-1)


def project_prototypes(bank: PrototypeBank, params: dict,
                       config: enc.EncoderConfig, samples: list,
                       partition: surf.PatchPartition, hemispheres: int,
                       epoch: int, batch_size: int = 16) -> None:
    """Replace every prototype with the most similar real patch embedding at
    its position, searching the given candidate samples (inference-mode
    encoding). Ties go to the lexicographically lowest subject id."""
    if not samples:
        raise TensorError("project_prototypes: empty candidate set")
    ordered = sorted(samples, key=lambda s: s.subject_id)
    embeddings = encode_samples(ordered, params, config, partition,
                                hemispheres, batch_size)  # C x N x D
    xi = bank.xi.data
    n = xi.shape[0]
    # rectified cosine of each candidate embedding against the current xi
    u = np.maximum(embeddings, 0.0)
    v = np.maximum(xi, 0.0)[None]
    nu = np.sqrt((u * u).sum(axis=-1))
    nv = np.sqrt((v * v).sum(axis=-1))
    valid = (nu >= 1e-8) & (nv >= 1e-8)
    sim = np.where(valid, (u * v).sum(axis=-1) /
                   np.where(valid, nu * nv, 1.0), 0.0)   # C x N
    best = sim.argmax(axis=0)                            # first max = lowest id
    new_xi = xi.copy()
    for i in range(n):
        new_xi[i] = embeddings[best[i], i]
        bank.provenance[i] = (ordered[best[i]].subject_id, epoch)
    bank.xi.data = new_xi


def encode_samples(samples: list, params: dict, config: enc.EncoderConfig,
                   partition: surf.PatchPartition, hemispheres: int,
                   batch_size: int = 16) -> np.ndarray:
    """Inference-mode embeddings for a sample list; returns [S, N_total, D]."""
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        patches = np.stack([surf.patchify(s, partition, hemispheres)
                            for s in chunk])
        emb = enc.encode(Tensor(patches), params, config, training=False)
        out.append(emb.data)
    return np.concatenate(out, axis=0)
