"""Patch/text alignment: adapters, similarity maps, losses and inference maps.

Similarity maps are per-patch softmax distributions over the K+1 states
(normal is channel 0). They are upsampled to image resolution with bilinear
interpolation (half-pixel centres, i.e. align_corners=False) before the
focal and dice terms.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import RngHandle, Tensor
from .prompts import StatePrototypes


class AdapterStack:
    """One affine map per tap layer, identity-initialised."""

    def __init__(self, weights: Sequence[Tensor], biases: Sequence[Tensor]):
        if len(weights) != len(biases):
            raise ValueError("adapter weights and biases differ in count")
        self.weights = list(weights)
        self.biases = list(biases)

    @classmethod
    def init(cls, n_stages: int, d_vision: int, d_text: int, rng: RngHandle | None = None,
             noise: float = 0.0) -> AdapterStack:
        ws, bs = [], []
        for i in range(n_stages):
            w = np.eye(d_vision, d_text)
            if noise and rng is not None:
                w = w + rng.child("adapter", i).normal(0.0, noise, w.shape)
            ws.append(Tensor(w, requires_grad=True, name=f"adapter.{i}.weight"))
            bs.append(Tensor(np.zeros(d_text), requires_grad=True, name=f"adapter.{i}.bias"))
        return cls(ws, bs)

    def __len__(self) -> int:
        return len(self.weights)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"adapter.{i}.weight"] = w
            out[f"adapter.{i}.bias"] = b
        return out

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def adapt_patches(patches: Tensor, adapters: AdapterStack, stage: int) -> Tensor:
    """Row-wise affine map of (..., G, d_vision) patches, then L2 normalisation."""
    if not 0 <= stage < len(adapters):
        raise IndexError(f"stage {stage} outside [0, {len(adapters)})")
    w = adapters.weights[stage]
    if patches.shape[-1] != w.shape[0]:
        raise nx.ShapeError(f"patch width {patches.shape[-1]} does not match adapter input {w.shape[0]}")
    return nx.l2_normalize(nx.matmul(patches, w) + adapters.biases[stage], axis=-1)


@dataclass
class SimilarityMapSet:
    maps: list[Tensor]  # each (B, K+1, h, w)
    tau: float

    @property
    def M(self) -> int:
        return len(self.maps)

    def arrays(self) -> list[np.ndarray]:
        return [m.data for m in self.maps]


def similarity_maps(adapted: Sequence[Tensor], prototypes: StatePrototypes | Tensor, tau: float = 0.07) -> SimilarityMapSet:
    """Per-patch softmax over cosine/tau against each state prototype."""
    protos = prototypes.all if isinstance(prototypes, StatePrototypes) else prototypes
    maps = []
    for z in adapted:
        batched = z if z.ndim == 3 else z.reshape((1,) + z.shape)
        B, G, _ = batched.shape
        side = int(round(np.sqrt(G)))
        if side * side != G:
            raise nx.ShapeError(f"{G} patches do not form a square grid")
        logits = nx.matmul(batched, protos.swapaxes(0, 1)) * (1.0 / tau)
        probs = nx.softmax(logits, axis=-1).swapaxes(1, 2)
        maps.append(probs.reshape(B, protos.shape[0], side, side))
    return SimilarityMapSet(maps, tau)


def global_logits(z_x: Tensor, z_N: Tensor, z_agg: Tensor, tau: float = 0.07) -> Tensor:
    """(B, 2) logits [normal, abnormal] from cosines of unit vectors."""
    zx = z_x if z_x.ndim == 2 else z_x.reshape(1, -1)
    cos_n = (zx * z_N).sum(axis=-1, keepdims=True)
    cos_a = (zx * z_agg).sum(axis=-1, keepdims=True)
    return nx.concat([cos_n, cos_a], axis=-1) * (1.0 / tau)


def global_score(z_x, z_N, z_agg, tau: float = 0.07) -> np.ndarray:
    """Softmax probabilities [normal, abnormal]; shape (2,) for one image or (B, 2)."""
    z_x, z_N, z_agg = nx.as_tensor(z_x), nx.as_tensor(z_N), nx.as_tensor(z_agg)
    with nx.no_grad():
        s = nx.softmax(global_logits(z_x, z_N, z_agg, tau), axis=-1).data
    return s[0] if z_x.ndim == 1 else s


def global_loss(z_x: Tensor, z_N: Tensor, z_agg: Tensor, labels: Sequence[int], tau: float = 0.07) -> Tensor:
    """Cross-entropy of the two-way softmax against image labels."""
    logp = nx.log_softmax(global_logits(z_x, z_N, z_agg, tau), axis=-1)
    labels = np.asarray(labels, dtype=np.int64)
    return -logp[np.arange(len(labels)), labels].mean()


@lru_cache(maxsize=64)
def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) bilinear weights with half-pixel centres, clamped at the edges."""
    A = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        A[i, i0] += 1.0 - frac
        A[i, i1] += frac
    A.setflags(write=False)
    return A


def upsample(x, H: int, W: int):
    """Bilinear upsampling of the last two axes to (H, W). Accepts Tensors or arrays."""
    h, w = x.shape[-2:]
    if H < h or W < w:
        raise ValueError(f"upsample cannot shrink {h}x{w} to {H}x{W}")
    Ah, Aw = interp_matrix(H, h), interp_matrix(W, w)
    if isinstance(x, Tensor):
        return nx.matmul(nx.matmul(Tensor(Ah), x), Tensor(Aw.T))
    return Ah @ np.asarray(x, dtype=np.float64) @ Aw.T


def focal_loss(pred: Tensor, target, gamma: float = 2.0, class_weights=None) -> Tensor:
    """Mean over pixels of ``-(1 - p_t)^gamma log p_t``; class axis is -3."""
    target = np.asarray(target, dtype=np.float64)
    p_t = nx.clamp_min((pred * target).sum(axis=-3), 1e-12)
    term = -nx.log(p_t)
    if gamma != 0:
        term = term * nx.power(1.0 - p_t, gamma)
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=np.float64).reshape(-1, 1, 1)
        term = term * (target * cw).sum(axis=-3)
    return term.mean()


def dice_loss(pred, target, eps: float = 1.0) -> Tensor:
    """``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`` per map, averaged over leading axes."""
    pred = nx.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    inter = (pred * target).sum(axis=(-2, -1))
    denom = pred.sum(axis=(-2, -1)) + target.sum(axis=(-2, -1)) + eps
    return (1.0 - (inter * 2.0 + eps) / denom).mean()


def stage_loss(stage_map: Tensor, Y: np.ndarray, gamma: float = 2.0, dice_eps: float = 1.0,
               class_weights=None) -> Tensor:
    H, W = Y.shape[-2:]
    up = upsample(stage_map, H, W)
    normal_p = up[..., 0, :, :]
    normal_y = Y[..., 0, :, :]
    return (focal_loss(up, Y, gamma, class_weights)
            + dice_loss(normal_p, normal_y, dice_eps)
            + dice_loss(1.0 - normal_p, 1.0 - normal_y, dice_eps))


def local_loss(maps: SimilarityMapSet, Y, gamma: float = 2.0, dice_eps: float = 1.0, class_weights=None) -> Tensor:
    """Mean over stages of focal + dice(normal) + dice(1 - normal)."""
    Y = np.asarray(Y, dtype=np.float64)
    total = None
    for m in maps.maps:
        if Y.ndim == 3 and m.ndim == 4:
            Yb = Y[None]
        else:
            Yb = Y
        term = stage_loss(m, Yb, gamma, dice_eps, class_weights)
        total = term if total is None else total + term
    return total * (1.0 / maps.M)


@dataclass
class LossBreakdown:
    global_: Tensor
    local: Tensor
    total: Tensor
    lam: float

    def values(self) -> dict[str, float]:
        return {"global": self.global_.item(), "local": self.local.item(), "total": self.total.item()}


def total_loss(global_term, local_term, lam: float = 4.0) -> LossBreakdown:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    g, l = nx.as_tensor(global_term), nx.as_tensor(local_term)
    return LossBreakdown(g, l, g + l * lam, lam)


# -- inference -----------------------------------------------------------------
def _map_arrays(maps) -> list[np.ndarray]:
    if isinstance(maps, SimilarityMapSet):
        return maps.arrays()
    return [m.data if isinstance(m, Tensor) else np.asarray(m) for m in maps]


def binary_anomaly_map(maps, H: int | None = None, W: int | None = None) -> np.ndarray:
    """Mean over stages of UP(1 - normal probability)."""
    arrs = _map_arrays(maps)
    h, w = arrs[0].shape[-2:]
    H, W = H or h, W or w
    return np.mean([upsample(1.0 - a[..., 0, :, :], H, W) for a in arrs], axis=0)


def multitype_mask(maps, H: int | None = None, W: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stage-summed class evidence and its argmax labels (ties go to the lowest index).

    Without ``H``/``W`` both are at patch resolution; otherwise the aggregate is
    upsampled before the argmax.
    """
    arrs = _map_arrays(maps)
    agg = np.sum(arrs, axis=0)
    if H is not None:
        agg = upsample(agg, H, W or H)
    return np.argmax(agg, axis=-3), agg


def image_score(s, anomaly_map, beta: float = 0.5) -> float | np.ndarray:
    """``beta * p(abnormal) + (1 - beta) * max(anomaly_map)``."""
    s = np.asarray(s, dtype=np.float64)
    amap = np.asarray(anomaly_map, dtype=np.float64)
    if s.ndim == 1:
        return float(beta * s[1] + (1.0 - beta) * amap.max())
    return beta * s[:, 1] + (1.0 - beta) * amap.reshape(amap.shape[0], -1).max(axis=1)


def multilabel_probs(z_x, prototypes: StatePrototypes, tau: float = 0.07) -> np.ndarray:
    """Per-defect sigmoid of (cos to defect - cos to normal) / tau."""
    zx = np.asarray(z_x.data if isinstance(z_x, Tensor) else z_x, dtype=np.float64)
    z_n = prototypes.z_N.data
    z_d = prototypes.z_D.data
    logits = (zx @ z_d.T - (zx @ z_n)[..., None]) / tau
    return 1.0 / (1.0 + np.exp(-logits))
