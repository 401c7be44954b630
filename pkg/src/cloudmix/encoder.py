"""EdgeConv graph encoder with learnable max/avg aggregation.

Per layer: a KNN graph is rebuilt in the layer's own input feature space
(dynamic graph), per-edge features concat(x_i, x_i - x_k) go through a
shared linear+ReLU map, and neighbors are pooled with a learnable blend of
max and average. The classification branch ends in one global embedding;
the segmentation branch also returns fused per-point features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geom import NeighborGraph, PointCloud, knn_graph


@dataclass(frozen=True)
class EncoderConfig:
    branch: str = "classification"
    k: int = 20
    cls_channels: tuple[int, ...] = (64, 64, 128, 256)
    seg_channels: tuple[int, ...] = (64, 64, 64)
    embedding_dim: int = 1024
    num_categories: int = 0

    def __post_init__(self):
        if self.branch not in ("classification", "segmentation"):
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.embedding_dim < 1:
            raise ValueError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        object.__setattr__(self, "cls_channels", tuple(int(c) for c in self.cls_channels))
        object.__setattr__(self, "seg_channels", tuple(int(c) for c in self.seg_channels))
        if any(c < 1 for c in self.cls_channels + self.seg_channels):
            raise ValueError("channel counts must be positive")
        if self.branch == "segmentation" and self.num_categories < 1:
            raise ValueError("segmentation branch needs num_categories >= 1")

    @property
    def channels(self) -> tuple[int, ...]:
        return self.cls_channels if self.branch == "classification" else self.seg_channels


@dataclass(frozen=True)
class EdgeConvLayer:
    """Edge MLP weights (2*C_in, C_out) plus the raw aggregation parameter."""

    w: object
    b: object
    alpha_raw: object


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter table; raw alphas start at 0 (an even max/avg blend)."""
    params: dict[str, np.ndarray] = {}
    c_in = 3
    for i, c_out in enumerate(config.channels):
        params[f"enc.edge{i}.w"] = glorot(rng, 2 * c_in, c_out)
        params[f"enc.edge{i}.b"] = np.zeros(c_out)
        params[f"enc.edge{i}.alpha"] = np.zeros(1)
        c_in = c_out
    total = sum(config.channels)
    params["enc.proj.w"] = glorot(rng, total, config.embedding_dim)
    params["enc.proj.b"] = np.zeros(config.embedding_dim)
    params["enc.global.alpha"] = np.zeros(1)
    if config.branch == "segmentation":
        fused_in = config.embedding_dim + config.num_categories
        params["enc.catfuse.w"] = glorot(rng, fused_in, config.embedding_dim)
        params["enc.catfuse.b"] = np.zeros(config.embedding_dim)
    return params


def layer_from_params(params: dict, index: int) -> EdgeConvLayer:
    return EdgeConvLayer(
        w=params[f"enc.edge{index}.w"],
        b=params[f"enc.edge{index}.b"],
        alpha_raw=params[f"enc.edge{index}.alpha"],
    )


def la_pool(edge_features, alpha) -> ad.Tensor:
    """alpha * max + (1 - alpha) * avg over axis 1 of an (N, k, C) tensor.

    alpha is expected in (0, 1); pass sigmoid(raw) for learnable blending.
    """
    ef = ad.as_tensor(edge_features)
    if ef.ndim != 3:
        raise ValueError(f"la_pool needs (N, k, C) input, got {ef.shape}")
    n, _, c = ef.shape
    a = ad.as_tensor(alpha)
    if a.data.size != 1:
        raise ValueError(f"alpha must hold one value, got shape {a.shape}")
    mx = ad.reduce_max(ef, axis=1)
    av = ad.reduce_mean(ef, axis=1)
    a_full = ad.broadcast_to(ad.reshape(a, (1, 1)), (n, c))
    ones = ad.as_tensor(np.ones((n, c)))
    return ad.add(ad.mul(a_full, mx), ad.mul(ad.sub(ones, a_full), av))


def edgeconv_forward(features, graph: NeighborGraph, layer: EdgeConvLayer) -> ad.Tensor:
    """One EdgeConv step: linear+ReLU on concat(x_i, x_i - x_k), LA-pooled.

    The graph must have been built on `features` itself (dynamic graph).
    """
    x = ad.as_tensor(features)
    if x.ndim != 2:
        raise ValueError(f"features must be (N, C), got {x.shape}")
    n, c = x.shape
    if graph.neighbors.shape[0] != n:
        raise ValueError(f"graph has {graph.neighbors.shape[0]} rows, features have {n}")
    k = graph.k
    w = ad.as_tensor(layer.w)
    neigh = ad.gather_rows(x, graph.neighbors)                       # (N, k, C)
    center = ad.broadcast_to(ad.reshape(x, (n, 1, c)), (n, k, c))
    edge = ad.concat([center, ad.sub(center, neigh)], axis=2)        # (N, k, 2C)
    flat = ad.reshape(edge, (n * k, 2 * c))
    hidden = ad.relu(ad.pointwise_linear(flat, w, ad.as_tensor(layer.b)))
    alpha = ad.sigmoid(ad.as_tensor(layer.alpha_raw))
    return la_pool(ad.reshape(hidden, (n, k, w.shape[1])), alpha)


def _as_points_tensor(points) -> ad.Tensor:
    if isinstance(points, ad.Tensor):
        t = points
    elif isinstance(points, PointCloud):
        t = ad.Tensor(points.points)
    else:
        t = ad.Tensor(np.asarray(points, dtype=np.float64))
    if t.ndim != 2 or t.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {t.shape}")
    return t


def _run_layers(x: ad.Tensor, config: EncoderConfig, params: dict) -> list[ad.Tensor]:
    feats = x
    skips = []
    for i in range(len(config.channels)):
        graph = knn_graph(feats.data, config.k)
        feats = edgeconv_forward(feats, graph, layer_from_params(params, i))
        skips.append(feats)
    return skips


def _project_and_pool(skips: list[ad.Tensor], config: EncoderConfig, params: dict) -> ad.Tensor:
    stacked = ad.concat(skips, axis=1)
    proj = ad.pointwise_linear(
        stacked, ad.as_tensor(params["enc.proj.w"]), ad.as_tensor(params["enc.proj.b"])
    )
    n = proj.shape[0]
    alpha = ad.sigmoid(ad.as_tensor(params["enc.global.alpha"]))
    pooled = la_pool(ad.reshape(proj, (1, n, config.embedding_dim)), alpha)
    return ad.reshape(pooled, (config.embedding_dim,))


def encode_cls(points, config: EncoderConfig, params: dict) -> ad.Tensor:
    """Embed one cloud as an (E,) vector, invariant to point order."""
    if config.branch != "classification":
        raise ValueError(f"encode_cls needs a classification config, got {config.branch!r}")
    x = _as_points_tensor(points)
    skips = _run_layers(x, config, params)
    return _project_and_pool(skips, config, params)


def encode_seg(points, category_onehot, config: EncoderConfig, params: dict) -> tuple[ad.Tensor, ad.Tensor]:
    """Per-point features (N, E + sum(channels)) plus the fused embedding (E,).

    The global embedding is fused with the category one-hot (concat, then a
    linear map back to E), repeated over N, and concatenated with every
    layer's per-point features.
    """
    if config.branch != "segmentation":
        raise ValueError(f"encode_seg needs a segmentation config, got {config.branch!r}")
    onehot = np.asarray(category_onehot, dtype=np.float64)
    if onehot.shape != (config.num_categories,):
        raise ValueError(
            f"bad one-hot: shape {onehot.shape}, expected ({config.num_categories},)"
        )
    if not (np.count_nonzero(onehot) == 1 and np.isclose(onehot.sum(), 1.0) and onehot.max() == 1.0):
        raise ValueError("bad one-hot: need exactly one entry set to 1")
    x = _as_points_tensor(points)
    n = x.shape[0]
    skips = _run_layers(x, config, params)
    f_raw = _project_and_pool(skips, config, params)
    e = config.embedding_dim
    fused_in = ad.concat([f_raw, ad.Tensor(onehot)], axis=0)
    f = ad.reshape(
        ad.pointwise_linear(
            ad.reshape(fused_in, (1, e + config.num_categories)),
            ad.as_tensor(params["enc.catfuse.w"]),
            ad.as_tensor(params["enc.catfuse.b"]),
        ),
        (e,),
    )
    f_rep = ad.broadcast_to(ad.reshape(f, (1, e)), (n, e))
    per_point = ad.concat(skips + [f_rep], axis=1)
    return per_point, f
