"""Pre-training and fine-tuning loops, label-ratio protocol, metrics.

Every random draw comes from a generator keyed by (seed, epoch, step, lane),
so any step's batch and loss can be reproduced in isolation and two runs
with the same seed are bit-identical. Lanes: 0 data, 1 model (dropout),
2 init, 3 epoch shuffling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor, backward
from .dataio import Checkpoint, Dataset, check_shape_table, filter_params
from .decoder import DecoderConfig, decode, denoise, init_decoder_params
from .encoder import EncoderConfig, encode_cls, encode_seg, glorot, init_encoder_params
from .geom import MdSample, PointCloud, augment, mix, subsample
from .losses import LossConfig, chamfer_distance_t, contrastive_loss, cross_entropy, total_loss
from .optim import AdamState, adam_step, cosine_lr

_DATA, _MODEL, _INIT, _SHUFFLE = 0, 1, 2, 3


def _rng(seed: int, epoch: int, step: int, lane: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, lane])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    epochs: int = 200
    lr0: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    k: int = 20
    points_per_cloud: int = 1024
    seed: int = 0
    lambda_: float = 1.0
    deterministic: bool = False
    augment: bool = True
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    scale_lo: float = 0.8
    scale_hi: float = 1.25
    overfit_pair: tuple[int, int] | None = None
    save_interval: int = 0
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(branch="classification"))
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        for name in ("batch_size", "epochs", "lr0", "points_per_cloud"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not (math.isfinite(self.lambda_) and self.lambda_ >= 0.0):
            raise ValueError(f"lambda_ must be finite and >= 0, got {self.lambda_}")
        if self.save_interval < 0:
            raise ValueError("save_interval must be >= 0")
        # k is authoritative here; keep the encoder view in sync
        if self.encoder.k != self.k:
            object.__setattr__(self, "encoder", replace(self.encoder, k=self.k))


def config_snapshot(config: TrainConfig) -> dict:
    """JSON-clean dict of the full config (tuples become lists)."""
    import json

    return json.loads(json.dumps(asdict(config)))


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss_chamfer: float
    loss_contrastive: float
    loss_total: float

    def line(self) -> str:
        return (
            f"{self.epoch} {self.step} {self.lr:.10g} "
            f"{self.loss_chamfer:.10g} {self.loss_contrastive:.10g} {self.loss_total:.10g}"
        )


def _check_finite_loss(value: float, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at epoch {epoch} step {step}")


# ------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricsReport:
    task: str
    overall_accuracy: float
    mean_class_accuracy: float
    mean_iou: float | None
    per_class: dict[int, float]

    def key_values(self) -> str:
        lines = [
            f"task={self.task}",
            f"overall_accuracy={self.overall_accuracy:.6f}",
            f"mean_class_accuracy={self.mean_class_accuracy:.6f}",
        ]
        if self.mean_iou is not None:
            lines.append(f"mean_iou={self.mean_iou:.6f}")
        for k in sorted(self.per_class):
            lines.append(f"class_{k}={self.per_class[k]:.6f}")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        rows = ["metric,value"]
        rows.append(f"overall_accuracy,{self.overall_accuracy:.6f}")
        rows.append(f"mean_class_accuracy,{self.mean_class_accuracy:.6f}")
        if self.mean_iou is not None:
            rows.append(f"mean_iou,{self.mean_iou:.6f}")
        for k in sorted(self.per_class):
            rows.append(f"class_{k},{self.per_class[k]:.6f}")
        return "\n".join(rows) + "\n"


def compute_metrics(predictions, labels, task: str, categories=None, parts_table=None) -> MetricsReport:
    """Accuracy metrics for "cls", per-point accuracy and mIoU for "seg".

    For "seg", predictions/labels are sequences of per-cloud label arrays,
    categories gives each cloud's category id, and parts_table maps a
    category to its part count. A shape's IoU averages over the parts of
    its category; a part absent from both prediction and truth scores 1.
    """
    if task == "cls":
        preds = np.asarray(predictions, dtype=np.int64).reshape(-1)
        labs = np.asarray(labels, dtype=np.int64).reshape(-1)
        if preds.size == 0:
            raise ValueError("empty predictions")
        if preds.shape != labs.shape:
            raise ValueError(f"{preds.shape[0]} predictions vs {labs.shape[0]} labels")
        per_class = {
            int(c): float(np.mean(preds[labs == c] == c)) for c in np.unique(labs)
        }
        return MetricsReport(
            task="cls",
            overall_accuracy=float(np.mean(preds == labs)),
            mean_class_accuracy=float(np.mean(list(per_class.values()))),
            mean_iou=None,
            per_class=per_class,
        )
    if task == "seg":
        if len(predictions) == 0:
            raise ValueError("empty predictions")
        if not (len(predictions) == len(labels) == len(categories)):
            raise ValueError("predictions, labels, categories must align")
        all_p = np.concatenate([np.asarray(p, dtype=np.int64) for p in predictions])
        all_l = np.concatenate([np.asarray(l, dtype=np.int64) for l in labels])
        if all_p.shape != all_l.shape:
            raise ValueError("per-cloud prediction/label lengths differ")
        oa = float(np.mean(all_p == all_l))
        part_recall = {
            int(c): float(np.mean(all_p[all_l == c] == c)) for c in np.unique(all_l)
        }
        shape_ious = []
        per_cat: dict[int, list[float]] = {}
        for p, l, cat in zip(predictions, labels, categories):
            p = np.asarray(p, dtype=np.int64)
            l = np.asarray(l, dtype=np.int64)
            ious = []
            for part in range(parts_table[cat]):
                inter = int(np.sum((p == part) & (l == part)))
                union = int(np.sum((p == part) | (l == part)))
                ious.append(1.0 if union == 0 else inter / union)
            iou = float(np.mean(ious))
            shape_ious.append(iou)
            per_cat.setdefault(int(cat), []).append(iou)
        return MetricsReport(
            task="seg",
            overall_accuracy=oa,
            mean_class_accuracy=float(np.mean(list(part_recall.values()))),
            mean_iou=float(np.mean(shape_ious)),
            per_class={c: float(np.mean(v)) for c, v in per_cat.items()},
        )
    raise ValueError(f"unknown task {task!r}")


# -------------------------------------------------------- label-ratio split


def label_ratio_split(dataset: Dataset, ratio: float, seed: int):
    """Stratified-by-category split into (labeled, unlabeled) parts.

    The labeled part keeps round(ratio * n) clouds per category, never
    fewer than one (with a warning). Returns None for an empty unlabeled
    part. Same seed, same split.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    cats = sorted({c.category for c in dataset.clouds if c.category is not None})
    if len(cats) != len({c.category for c in dataset.clouds}):
        raise ValueError("every cloud needs a category for a stratified split")
    labeled: list[int] = []
    for cat in cats:
        idx = [i for i, c in enumerate(dataset.clouds) if c.category == cat]
        take = int(math.floor(ratio * len(idx) + 0.5))  # half rounds up
        if take < 1:
            warnings.warn(f"category {cat}: ratio {ratio} keeps 0 of {len(idx)} clouds; keeping 1")
            take = 1
        order = np.random.default_rng([seed, cat]).permutation(len(idx))
        labeled.extend(idx[j] for j in order[:take])
    labeled.sort()
    rest = sorted(set(range(len(dataset))) - set(labeled))
    return dataset.subset(labeled), (dataset.subset(rest) if rest else None)


# ------------------------------------------------------------ batch assembly


def _prepare_cloud(cloud: PointCloud, config: TrainConfig, n_target: int, rng) -> PointCloud:
    if cloud.n_points > n_target:
        cloud = subsample(cloud, n_target, rng)
    if config.augment:
        cloud = augment(
            cloud, config.jitter_sigma, config.jitter_clip,
            config.scale_lo, config.scale_hi, rng,
        )
    return cloud


def assemble_batch(dataset: Dataset, config: TrainConfig, epoch: int, step: int):
    """Draw batch_size ordered pairs, mix each, pick a conditioning category.

    Pairs are uniform with replacement over the train split. With
    overfit_pair set, the same pair and the same random stream (epoch 0,
    step 0) are used every time, freezing one sample for debugging.
    Returns a list of (MdSample, category|None).
    """
    train_idx = dataset.indices("train")
    if config.overfit_pair is not None:
        epoch, step = 0, 0
    rng = _rng(config.seed, epoch, step, _DATA)
    batch = []
    for _ in range(config.batch_size):
        if config.overfit_pair is not None:
            i, j = config.overfit_pair
        else:
            i = train_idx[int(rng.integers(len(train_idx)))]
            j = train_idx[int(rng.integers(len(train_idx)))]
        a, b = dataset.clouds[i], dataset.clouds[j]
        n_target = min(config.points_per_cloud, a.n_points, b.n_points)
        a = _prepare_cloud(a, config, n_target, rng)
        b = _prepare_cloud(b, config, n_target, rng)
        sample = mix(a, b, rng)
        category = (a.category, b.category)[int(rng.integers(2))]
        batch.append((sample, category))
    return batch


def _onehot(category, n_categories: int) -> np.ndarray:
    if category is None:
        raise ValueError("segmentation-branch training needs a category per cloud")
    vec = np.zeros(n_categories)
    vec[int(category)] = 1.0
    return vec


def _embed_mixed(sample: MdSample, category, config: TrainConfig, tensors: dict):
    if config.encoder.branch == "segmentation":
        _, f = encode_seg(
            sample.mixed, _onehot(category, config.encoder.num_categories),
            config.encoder, tensors,
        )
        return f
    return encode_cls(sample.mixed, config.encoder, tensors)


def _batch_loss(batch, config: TrainConfig, tensors: dict, rng_model):
    """Mean reconstruction loss over the batch plus the contrastive term.

    Returns (total Tensor, chamfer float, contrastive float).
    """
    recon_terms = []
    rows = []
    for sample, category in batch:
        f = _embed_mixed(sample, category, config, tensors)
        pred_a = denoise(
            decode(f, sample.cond_a, config.decoder, tensors, rng=rng_model, training=True),
            tensors,
        )
        pred_b = denoise(
            decode(f, sample.cond_b, config.decoder, tensors, rng=rng_model, training=True),
            tensors,
        )
        term = ad.add(
            chamfer_distance_t(pred_a, sample.source_a.points),
            chamfer_distance_t(pred_b, sample.source_b.points),
        )
        recon_terms.append(term)
        rows.append(ad.reshape(f, (1, config.encoder.embedding_dim)))
    recon = recon_terms[0]
    for term in recon_terms[1:]:
        recon = ad.add(recon, term)
    if len(recon_terms) > 1:
        recon = ad.mul(recon, 1.0 / len(recon_terms))
    if config.lambda_ > 0.0:
        contrastive = contrastive_loss(ad.concat(rows, axis=0))
        co_val = float(contrastive.data)
    else:
        contrastive = ad.Tensor(np.zeros(()))
        co_val = 0.0
    total = total_loss(recon, contrastive, LossConfig(lambda_=config.lambda_))
    return total, float(recon.data), co_val


def init_pretrain_state(config: TrainConfig) -> dict[str, np.ndarray]:
    rng = _rng(config.seed, 0, 0, _INIT)
    params = init_encoder_params(config.encoder, rng)
    params.update(init_decoder_params(config.decoder, config.encoder.embedding_dim, rng))
    return params


def _as_leaves(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def make_checkpoint(params, adam: AdamState, epoch: int, config: TrainConfig) -> Checkpoint:
    return Checkpoint(
        params={k: v.copy() for k, v in params.items()},
        adam_m={k: adam.m.get(k, np.zeros_like(v)).copy() for k, v in params.items()},
        adam_v={k: adam.v.get(k, np.zeros_like(v)).copy() for k, v in params.items()},
        adam_step_count=adam.step_count,
        epoch=epoch,
        config=config_snapshot(config),
    )


def recompute_step_loss(dataset: Dataset, config: TrainConfig, params, epoch: int, step: int):
    """Loss a pretraining step would compute from these parameter values.

    Follows the exact random streams of the live loop, so the result is
    float-identical to the recorded step; used to audit checkpoints.
    """
    batch = assemble_batch(dataset, config, epoch, step)
    rng_model = _rng(config.seed, epoch, step, _MODEL)
    total, ch, co = _batch_loss(batch, config, {k: Tensor(v) for k, v in params.items()}, rng_model)
    return ch, co, float(total.data)


def pretrain(dataset: Dataset, config: TrainConfig, log=None, save_hook=None):
    """Self-supervised mixing/disentangling pre-training.

    Per step: draw pairs, mix and erase, encode the mixed clouds, decode
    each source from its coordinate-erased conditional, and take one Adam
    step on chamfer + lambda * contrastive with a cosine learning rate.
    Returns (Checkpoint, history of StepRecord). log, if given, receives
    one formatted line per step; save_hook(epoch, checkpoint) fires every
    save_interval epochs.
    """
    train_idx = dataset.indices("train")
    if len(train_idx) < 2:
        raise ValueError(f"need at least 2 training clouds, have {len(train_idx)}")
    if config.lambda_ > 0.0 and config.batch_size < 2:
        raise ValueError("contrastive term needs batch_size >= 2 (or lambda_ = 0)")
    params = init_pretrain_state(config)
    adam = AdamState(beta1=config.beta1, beta2=config.beta2)
    steps_per_epoch = max(1, math.ceil(len(train_idx) / config.batch_size))
    history: list[StepRecord] = []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0)
        for step in range(steps_per_epoch):
            batch = assemble_batch(dataset, config, epoch, step)
            rng_model = _rng(config.seed, epoch, step, _MODEL)
            tensors = _as_leaves(params)
            total, ch_val, co_val = _batch_loss(batch, config, tensors, rng_model)
            _check_finite_loss(float(total.data), epoch, step)
            backward(total)
            grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
            adam_step(params, grads, adam, lr)
            rec = StepRecord(epoch, step, lr, ch_val, co_val, float(total.data))
            history.append(rec)
            if log is not None:
                log(rec.line())
        if save_hook is not None and config.save_interval and (epoch + 1) % config.save_interval == 0:
            save_hook(epoch, make_checkpoint(params, adam, epoch + 1, config))
    return make_checkpoint(params, adam, config.epochs, config), history


# ------------------------------------------------------------- fine-tuning


def _load_encoder_from(init: Checkpoint | None, params: dict[str, np.ndarray]) -> None:
    if init is None:
        return
    have = filter_params(init.params, "enc.")
    want = filter_params(params, "enc.")
    check_shape_table(want, have, context="encoder init from checkpoint")
    for name, value in have.items():
        params[name] = value.copy()


def _check_labels(dataset: Dataset) -> int:
    n_classes = len(dataset.category_names)
    if n_classes < 2:
        raise ValueError("need a category table with >= 2 classes")
    for i, c in enumerate(dataset.clouds):
        if c.category is None:
            raise ValueError(f"cloud {i} has no category label")
        if not 0 <= c.category < n_classes:
            raise ValueError(f"cloud {i} category {c.category} outside {n_classes} classes")
    return n_classes


def _eval_cloud(cloud: PointCloud, config: TrainConfig, params):
    """Deterministic full-cloud forward for evaluation (no augmentation)."""
    if config.encoder.branch == "segmentation":
        per_point, _ = encode_seg(
            cloud.points, _onehot(cloud.category, config.encoder.num_categories),
            config.encoder, params,
        )
        return per_point
    return encode_cls(cloud.points, config.encoder, params)


def finetune_cls(dataset: Dataset, init: Checkpoint | None, config: TrainConfig, log=None):
    """Linear classification head on the global embedding, cross-entropy.

    init is a pre-training checkpoint (encoder weights adopted after a
    shape-table check) or None for the from-scratch baseline under the
    same schedule. Returns (Checkpoint, MetricsReport, history).
    """
    if config.encoder.branch != "classification":
        raise ValueError("finetune_cls needs a classification-branch encoder config")
    n_classes = _check_labels(dataset)
    train_idx = dataset.indices("train")
    test_idx = dataset.indices("test")
    if not train_idx or not test_idx:
        raise ValueError("need non-empty train and test splits")

    rng = _rng(config.seed, 0, 0, _INIT)
    params = init_encoder_params(config.encoder, rng)
    e_dim = config.encoder.embedding_dim
    params["head.w"] = glorot(rng, e_dim, n_classes)
    params["head.b"] = np.zeros(n_classes)
    _load_encoder_from(init, params)

    adam = AdamState(beta1=config.beta1, beta2=config.beta2)
    steps_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    history: list[StepRecord] = []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0)
        order = _rng(config.seed, epoch, 0, _SHUFFLE).permutation(len(train_idx))
        for step in range(steps_per_epoch):
            ids = [train_idx[j] for j in order[step * config.batch_size : (step + 1) * config.batch_size]]
            rng_data = _rng(config.seed, epoch, step, _DATA)
            tensors = _as_leaves(params)
            rows = []
            labels = []
            for i in ids:
                cloud = dataset.clouds[i]
                n_target = min(config.points_per_cloud, cloud.n_points)
                cloud = _prepare_cloud(cloud, config, n_target, rng_data)
                emb = encode_cls(cloud.points, config.encoder, tensors)
                rows.append(ad.reshape(emb, (1, e_dim)))
                labels.append(cloud.category)
            logits = ad.pointwise_linear(
                ad.concat(rows, axis=0) if len(rows) > 1 else rows[0],
                tensors["head.w"], tensors["head.b"],
            )
            loss = cross_entropy(logits, np.array(labels, dtype=np.int64))
            _check_finite_loss(float(loss.data), epoch, step)
            backward(loss)
            grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
            adam_step(params, grads, adam, lr)
            rec = StepRecord(epoch, step, lr, 0.0, 0.0, float(loss.data))
            history.append(rec)
            if log is not None:
                log(rec.line())

    report = evaluate_cls(dataset, params, config)
    return make_checkpoint(params, adam, config.epochs, config), report, history


def evaluate_cls(dataset: Dataset, params, config: TrainConfig, split: str = "test") -> MetricsReport:
    idx = dataset.indices(split)
    if not idx:
        raise ValueError(f"no clouds in split {split!r}")
    preds = []
    labels = []
    for i in idx:
        cloud = dataset.clouds[i]
        emb = _eval_cloud(cloud, config, params)
        logits = ad.pointwise_linear(ad.reshape(emb, (1, config.encoder.embedding_dim)),
                                     params["head.w"], params["head.b"])
        preds.append(int(np.argmax(logits.data[0])))
        labels.append(cloud.category)
    return compute_metrics(preds, labels, "cls")


def parts_table_of(dataset: Dataset) -> dict[int, int]:
    """Per-category part counts inferred from the labels present."""
    table: dict[int, int] = {}
    for i, c in enumerate(dataset.clouds):
        if c.part_labels is None:
            raise ValueError(f"cloud {i} is missing part labels")
        table[c.category] = max(table.get(c.category, 0), int(c.part_labels.max()) + 1)
    return table


def _category_mask(parts_table: dict[int, int], head_width: int, category: int) -> np.ndarray:
    mask = np.zeros(head_width)
    mask[: parts_table[category]] = 1.0
    return mask


def finetune_seg(dataset: Dataset, init: Checkpoint | None, config: TrainConfig, log=None):
    """Per-point classification head on the N x F features, masked per
    category so each shape only competes among its own parts.

    Returns (Checkpoint, MetricsReport, history).
    """
    if config.encoder.branch != "segmentation":
        raise ValueError("finetune_seg needs a segmentation-branch encoder config")
    _check_labels(dataset)
    parts = parts_table_of(dataset)
    head_width = max(parts.values())
    train_idx = dataset.indices("train")
    test_idx = dataset.indices("test")
    if not train_idx or not test_idx:
        raise ValueError("need non-empty train and test splits")

    rng = _rng(config.seed, 0, 0, _INIT)
    params = init_encoder_params(config.encoder, rng)
    feat_dim = config.encoder.embedding_dim + sum(config.encoder.seg_channels)
    params["head.w"] = glorot(rng, feat_dim, head_width)
    params["head.b"] = np.zeros(head_width)
    _load_encoder_from(init, params)

    adam = AdamState(beta1=config.beta1, beta2=config.beta2)
    steps_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    history: list[StepRecord] = []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr0)
        order = _rng(config.seed, epoch, 0, _SHUFFLE).permutation(len(train_idx))
        for step in range(steps_per_epoch):
            ids = [train_idx[j] for j in order[step * config.batch_size : (step + 1) * config.batch_size]]
            rng_data = _rng(config.seed, epoch, step, _DATA)
            tensors = _as_leaves(params)
            loss = None
            for i in ids:
                cloud = dataset.clouds[i]
                n_target = min(config.points_per_cloud, cloud.n_points)
                cloud = _prepare_cloud(cloud, config, n_target, rng_data)
                per_point, _ = encode_seg(
                    cloud.points, _onehot(cloud.category, config.encoder.num_categories),
                    config.encoder, tensors,
                )
                logits = ad.pointwise_linear(per_point, tensors["head.w"], tensors["head.b"])
                mask = np.broadcast_to(
                    _category_mask(parts, head_width, cloud.category),
                    (cloud.n_points, head_width),
                )
                ce = cross_entropy(logits, cloud.part_labels, class_mask=mask)
                loss = ce if loss is None else ad.add(loss, ce)
            if len(ids) > 1:
                loss = ad.mul(loss, 1.0 / len(ids))
            _check_finite_loss(float(loss.data), epoch, step)
            backward(loss)
            grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
            adam_step(params, grads, adam, lr)
            rec = StepRecord(epoch, step, lr, 0.0, 0.0, float(loss.data))
            history.append(rec)
            if log is not None:
                log(rec.line())

    report = evaluate_seg(dataset, params, config, parts)
    return make_checkpoint(params, adam, config.epochs, config), report, history


def evaluate_seg(dataset: Dataset, params, config: TrainConfig,
                 parts_table: dict[int, int] | None = None, split: str = "test") -> MetricsReport:
    if parts_table is None:
        parts_table = parts_table_of(dataset)
    head_width = params["head.w"].shape[-1]
    idx = dataset.indices(split)
    if not idx:
        raise ValueError(f"no clouds in split {split!r}")
    preds, labels, cats = [], [], []
    for i in idx:
        cloud = dataset.clouds[i]
        if cloud.part_labels is None:
            raise ValueError(f"cloud {i} is missing part labels")
        per_point = _eval_cloud(cloud, config, params)
        logits = ad.pointwise_linear(per_point, params["head.w"], params["head.b"]).data
        allowed = _category_mask(parts_table, head_width, cloud.category)
        masked = np.where(allowed > 0, logits, -np.inf)  # argmax restricted to own parts
        preds.append(np.argmax(masked, axis=1))
        labels.append(cloud.part_labels)
        cats.append(cloud.category)
    return compute_metrics(preds, labels, "seg", categories=cats, parts_table=parts_table)


def embed_dataset(dataset: Dataset, params, config: TrainConfig) -> np.ndarray:
    """One embedding row per cloud, any split, deterministic."""
    rows = []
    for cloud in dataset.clouds:
        if config.encoder.branch == "segmentation":
            _, f = encode_seg(
                cloud.points, _onehot(cloud.category, config.encoder.num_categories),
                config.encoder, params,
            )
        else:
            f = encode_cls(cloud.points, config.encoder, params)
        rows.append(f.data)
    return np.stack(rows, axis=0)


def config_from_snapshot(snap: dict) -> TrainConfig:
    """Rebuild a TrainConfig from a checkpoint's JSON config snapshot."""
    enc = snap["encoder"]
    dec = snap["decoder"]
    overfit = snap.get("overfit_pair")
    return TrainConfig(
        batch_size=snap["batch_size"],
        epochs=snap["epochs"],
        lr0=snap["lr0"],
        beta1=snap["beta1"],
        beta2=snap["beta2"],
        k=snap["k"],
        points_per_cloud=snap["points_per_cloud"],
        seed=snap["seed"],
        lambda_=snap["lambda_"],
        deterministic=snap["deterministic"],
        augment=snap["augment"],
        jitter_sigma=snap["jitter_sigma"],
        jitter_clip=snap["jitter_clip"],
        scale_lo=snap["scale_lo"],
        scale_hi=snap["scale_hi"],
        overfit_pair=tuple(overfit) if overfit is not None else None,
        save_interval=snap["save_interval"],
        encoder=EncoderConfig(
            branch=enc["branch"],
            k=enc["k"],
            cls_channels=tuple(enc["cls_channels"]),
            seg_channels=tuple(enc["seg_channels"]),
            embedding_dim=enc["embedding_dim"],
            num_categories=enc["num_categories"],
        ),
        decoder=DecoderConfig(
            widths=tuple(dec["widths"]),
            dropout_p=dec["dropout_p"],
            denoise_hidden=dec["denoise_hidden"],
        ),
    )


def apply_label_ratio(dataset: Dataset, ratio: float, seed: int) -> Dataset:
    """Shrink the train split to a stratified labeled fraction; other splits
    pass through untouched."""
    train_idx = dataset.indices("train")
    if not train_idx:
        raise ValueError("dataset has no train split to subsample")
    labeled, _ = label_ratio_split(dataset.subset(train_idx), ratio, seed)
    rest = [i for i in range(len(dataset)) if dataset.split[i] != "train"]
    clouds = list(labeled.clouds) + [dataset.clouds[i] for i in rest]
    split = ["train"] * len(labeled.clouds) + [dataset.split[i] for i in rest]
    return Dataset(clouds=clouds, split=split, category_names=dataset.category_names)
