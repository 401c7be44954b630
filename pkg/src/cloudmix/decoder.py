"""Instance-adaptive decoder and the denoising block.

The decoder turns one embedding plus a conditional (coordinate-erased)
cloud into a reconstructed cloud. Conditioning re-enters at every unit so
the same embedding can be steered toward either source of a mixture. The
denoise block rescales each point by a learned weight in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import glorot


@dataclass(frozen=True)
class DecoderConfig:
    widths: tuple[int, ...] = (512, 256, 128)
    dropout_p: float = 0.5
    denoise_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3:
            raise ValueError(f"decoder uses exactly three units, got {len(self.widths)}")
        if any(w < 1 for w in self.widths):
            raise ValueError("unit widths must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.denoise_hidden < 1:
            raise ValueError("denoise_hidden must be positive")


def init_decoder_params(
    config: DecoderConfig, embedding_dim: int, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    c_in = embedding_dim + 3  # fused embedding + conditional coordinates
    for i, width in enumerate(config.widths):
        c = c_in + 3  # each unit re-concatenates the conditional coordinates
        params[f"dec.unit{i}.res.w1"] = glorot(rng, c, c)
        params[f"dec.unit{i}.res.b1"] = np.zeros(c)
        params[f"dec.unit{i}.res.w2"] = glorot(rng, c, c)
        params[f"dec.unit{i}.res.b2"] = np.zeros(c)
        params[f"dec.unit{i}.reduce.w"] = glorot(rng, c, width)
        params[f"dec.unit{i}.reduce.b"] = np.zeros(width)
        c_in = width
    params["dec.out.w"] = glorot(rng, c_in, 3)
    params["dec.out.b"] = np.zeros(3)
    h = config.denoise_hidden
    params["dn.w1"] = glorot(rng, 1, h)
    params["dn.b1"] = np.zeros(h)
    params["dn.w2"] = glorot(rng, h, 1)
    params["dn.b2"] = np.zeros(1)
    return params


def ins_res_block(x: ad.Tensor, w1, b1, w2, b2) -> ad.Tensor:
    """Two channel-preserving pointwise layers with ReLU, plus a skip add."""
    h = ad.relu(ad.pointwise_linear(x, ad.as_tensor(w1), ad.as_tensor(b1)))
    h = ad.relu(ad.pointwise_linear(h, ad.as_tensor(w2), ad.as_tensor(b2)))
    return ad.add(x, h)


def decode(
    f,
    cond,
    config: DecoderConfig,
    params: dict,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> ad.Tensor:
    """Reconstruct an (N, 3) cloud from embedding f and conditional coords.

    The embedding is repeated N times and fused with cond under two
    dropouts (training only); three units of (InsResBlock -> reducing map)
    re-concatenate the clean cond each time; a final pointwise map emits
    coordinates with no activation.
    """
    cond_t = ad.as_tensor(cond)
    if cond_t.ndim != 2 or cond_t.shape[1] != 3:
        raise ValueError(f"cond must be (N, 3), got {cond_t.shape}")
    n = cond_t.shape[0]
    if n < 1:
        raise ValueError("cond must contain at least one point")
    f_t = ad.as_tensor(f)
    if f_t.ndim != 1:
        raise ValueError(f"embedding must be one-dimensional, got {f_t.shape}")
    if training and config.dropout_p > 0 and rng is None:
        raise ValueError("training-mode decode needs an rng for dropout")
    e = f_t.shape[0]
    f_rep = ad.broadcast_to(ad.reshape(f_t, (1, e)), (n, e))
    cond_in = cond_t
    if training and config.dropout_p > 0:
        f_rep = ad.dropout(f_rep, config.dropout_p, rng, True)
        cond_in = ad.dropout(cond_t, config.dropout_p, rng, True)
    h = ad.concat([f_rep, cond_in], axis=1)
    for i in range(len(config.widths)):
        u = ad.concat([h, cond_t], axis=1)
        u = ins_res_block(
            u,
            params[f"dec.unit{i}.res.w1"],
            params[f"dec.unit{i}.res.b1"],
            params[f"dec.unit{i}.res.w2"],
            params[f"dec.unit{i}.res.b2"],
        )
        h = ad.relu(
            ad.pointwise_linear(
                u,
                ad.as_tensor(params[f"dec.unit{i}.reduce.w"]),
                ad.as_tensor(params[f"dec.unit{i}.reduce.b"]),
            )
        )
    return ad.pointwise_linear(h, ad.as_tensor(params["dec.out.w"]), ad.as_tensor(params["dec.out.b"]))


def denoise_weights(noisy, params: dict) -> ad.Tensor:
    """Per-point weights in (0, 1), shape (N, 1).

    Each point's score is the mean of its three coordinates plus the mean
    score over all N points (one scalar of global context); two pointwise
    layers and a sigmoid turn that into a weight.
    """
    x = ad.as_tensor(noisy)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"noisy cloud must be (N, 3), got {x.shape}")
    n = x.shape[0]
    score = ad.reduce_mean(x, axis=1)                       # (N,)
    ctx = ad.reduce_mean(score, axis=0)                     # ()
    ctx_full = ad.broadcast_to(ad.reshape(ctx, (1, 1)), (n, 1))
    s = ad.add(ad.reshape(score, (n, 1)), ctx_full)
    h = ad.relu(ad.pointwise_linear(s, ad.as_tensor(params["dn.w1"]), ad.as_tensor(params["dn.b1"])))
    return ad.sigmoid(ad.pointwise_linear(h, ad.as_tensor(params["dn.w2"]), ad.as_tensor(params["dn.b2"])))


def denoise(noisy, params: dict) -> ad.Tensor:
    """Scale every point toward the origin by its learned weight."""
    x = ad.as_tensor(noisy)
    w = denoise_weights(x, params)
    n = x.shape[0]
    return ad.mul(x, ad.broadcast_to(w, (n, 3)))
