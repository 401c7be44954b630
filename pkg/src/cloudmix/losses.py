"""Training objectives: Chamfer reconstruction, contrastive embedding
spread, their weighted total, and cross-entropy for fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class LossConfig:
    """lambda_ weights the contrastive term; 0 disables it."""

    lambda_: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lambda_) or self.lambda_ < 0:
            raise ValueError(f"lambda_ must be finite and >= 0, got {self.lambda_}")


def chamfer_distance_t(pred, target) -> ad.Tensor:
    """Differentiable symmetric Chamfer distance, pred (N, 3) vs target (M, 3).

    Float-for-float the same computation as geom.chamfer_distance, so the
    two agree exactly; gradients flow into pred only (target is data).
    Nearest-neighbor ties route gradient to the first minimal index.
    """
    p = ad.as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, ad.Tensor) else target, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] == 0:
        raise ValueError(f"pred must be nonempty (N, 3), got {p.shape}")
    if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] == 0:
        raise ValueError(f"target must be nonempty (M, 3), got {t.shape}")
    n, m = p.shape[0], t.shape[0]
    pb = ad.broadcast_to(ad.reshape(p, (n, 1, 3)), (n, m, 3))
    tb = ad.Tensor(np.broadcast_to(t.reshape(1, m, 3), (n, m, 3)))
    diff = ad.sub(pb, tb)
    d2 = ad.reduce_sum(ad.mul(diff, diff), axis=2)
    fwd = ad.reduce_mean(ad.sqrt(ad.reduce_min(d2, axis=1)), axis=0)
    bwd = ad.reduce_mean(ad.sqrt(ad.reduce_min(d2, axis=0)), axis=0)
    return ad.add(fwd, bwd)


def reconstruction_loss(s_hat_a, s_a, s_hat_b, s_b) -> ad.Tensor:
    """Sum of the two per-source Chamfer distances."""
    return ad.add(chamfer_distance_t(s_hat_a, s_a), chamfer_distance_t(s_hat_b, s_b))


def contrastive_loss(embeddings) -> ad.Tensor:
    """Mean absolute difference between (Q+1)/2 and I over all B^2 entries,
    where Q is the cosine-similarity matrix of the embedding rows."""
    f = ad.as_tensor(embeddings)
    if f.ndim != 2:
        raise ValueError(f"embeddings must be (B, E), got {f.shape}")
    b, e = f.shape
    if b < 2:
        raise ValueError(f"need at least 2 embeddings, got {b}")
    sq = ad.reduce_sum(ad.mul(f, f), axis=1)
    if np.any(sq.data == 0.0):
        raise ValueError("degenerate embedding: zero-norm row")
    norm = ad.sqrt(sq)
    fn = ad.div(f, ad.broadcast_to(ad.reshape(norm, (b, 1)), (b, e)))
    q = ad.matmul(fn, ad.transpose(fn))
    half = ad.as_tensor(0.5, (b, b))
    eye = ad.Tensor(np.eye(b))
    delta = ad.abs_(ad.sub(ad.mul(ad.add(q, ad.as_tensor(1.0, (b, b))), half), eye))
    return ad.reduce_mean(ad.reshape(delta, (b * b,)), axis=0)


def total_loss(recon, contrastive, config: LossConfig) -> ad.Tensor:
    """recon + lambda_ * contrastive; with lambda_ = 0 the contrastive
    branch drops out of the graph entirely."""
    r = ad.as_tensor(recon)
    if config.lambda_ == 0.0:
        return r
    c = ad.as_tensor(contrastive)
    return ad.add(r, ad.mul(c, ad.as_tensor(config.lambda_, c.shape)))


def cross_entropy(logits, labels, class_mask=None) -> ad.Tensor:
    """Mean negative log-likelihood over rows of (N, C) logits.

    class_mask, when given, is an (N, C) 0/1 array; masked-out classes get
    a -1e9 logit so they draw no probability mass.
    """
    z = ad.as_tensor(logits)
    if z.ndim != 2:
        raise ValueError(f"logits must be (N, C), got {z.shape}")
    n, c = z.shape
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ValueError(f"labels must be ({n},), got {y.shape}")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"labels out of range for {c} classes")
    if class_mask is not None:
        mask = np.asarray(class_mask, dtype=np.float64)
        if mask.shape != (n, c):
            raise ValueError(f"class_mask must be ({n}, {c}), got {mask.shape}")
        if np.any(mask[np.arange(n), y] == 0.0):
            raise ValueError("class_mask disallows a true label")
        z = ad.add(z, ad.Tensor((1.0 - mask) * -1e9))
    mx = ad.reduce_max(z, axis=1)
    shifted = ad.sub(z, ad.broadcast_to(ad.reshape(mx, (n, 1)), (n, c)))
    lse = ad.log(ad.reduce_sum(ad.exp(shifted), axis=1))
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    picked = ad.reduce_sum(ad.mul(shifted, ad.Tensor(onehot)), axis=1)
    return ad.reduce_mean(ad.sub(lse, picked), axis=0)
