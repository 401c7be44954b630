import json
from dataclasses import asdict

import numpy as np
import pytest

from cloudmix.dataio import (
    Dataset,
    ShapeTableMismatchError,
    load_checkpoint,
    make_synthetic_dataset,
    save_checkpoint,
    synth_generate,
)
from cloudmix.decoder import DecoderConfig
from cloudmix.encoder import EncoderConfig
from cloudmix.geom import PointCloud
from cloudmix.training import (
    MetricsReport,
    StepRecord,
    TrainConfig,
    assemble_batch,
    compute_metrics,
    config_snapshot,
    embed_dataset,
    evaluate_cls,
    finetune_cls,
    finetune_seg,
    init_pretrain_state,
    label_ratio_split,
    parts_table_of,
    pretrain,
    recompute_step_loss,
)

TINY_CLS_ENC = EncoderConfig(branch="classification", k=4, cls_channels=(6, 6), embedding_dim=10)
TINY_SEG_ENC = EncoderConfig(
    branch="segmentation", k=4, seg_channels=(4, 4, 4), embedding_dim=8, num_categories=2
)
TINY_DEC = DecoderConfig(widths=(16, 12, 8), dropout_p=0.0, denoise_hidden=6)


def tiny_pretrain_config(**kw):
    base = dict(
        batch_size=2,
        epochs=2,
        lr0=0.01,
        k=4,
        points_per_cloud=16,
        seed=5,
        lambda_=1.0,
        augment=False,
        encoder=TINY_CLS_ENC,
        decoder=TINY_DEC,
    )
    base.update(kw)
    return TrainConfig(**base)


def two_class_dataset(n_train, n_test, n_points, seed):
    return make_synthetic_dataset(n_train, n_test, n_points, seed, kinds=("sphere", "box"))


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 12
        assert cfg.lr0 == 0.1
        assert (cfg.beta1, cfg.beta2) == (0.9, 0.99)
        assert cfg.k == 20
        assert cfg.points_per_cloud == 1024

    def test_k_syncs_encoder(self):
        cfg = TrainConfig(k=7, encoder=EncoderConfig(branch="classification", k=20))
        assert cfg.encoder.k == 7

    @pytest.mark.parametrize(
        "kw",
        [
            {"batch_size": 0},
            {"epochs": 0},
            {"lr0": -1.0},
            {"beta1": 1.0},
            {"lambda_": -0.5},
            {"lambda_": float("nan")},
            {"save_interval": -1},
        ],
    )
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_snapshot_is_json_clean(self):
        snap = config_snapshot(tiny_pretrain_config())
        assert json.loads(json.dumps(snap)) == snap
        assert snap["encoder"]["branch"] == "classification"

    def test_step_record_line(self):
        line = StepRecord(3, 1, 0.05, 1.25, 0.5, 1.75).line()
        fields = line.split(" ")
        assert fields[:3] == ["3", "1", "0.05"]
        assert len(fields) == 6


class TestComputeMetricsCls:
    def test_half_right_half_wrong(self):
        # class 0: 10 of 10 right; class 1: 0 of 10 right
        labels = [0] * 10 + [1] * 10
        preds = [0] * 20
        rep = compute_metrics(preds, labels, "cls")
        assert rep.overall_accuracy == 0.5
        assert rep.mean_class_accuracy == 0.5
        assert rep.per_class == {0: 1.0, 1: 0.0}

    def test_all_correct(self):
        rep = compute_metrics([0, 1, 2], [0, 1, 2], "cls")
        assert rep.overall_accuracy == 1.0
        assert rep.mean_class_accuracy == 1.0

    def test_confusion_matrix_recount(self):
        rng = np.random.default_rng(50)
        labels = rng.integers(0, 4, size=200)
        preds = rng.integers(0, 4, size=200)
        rep = compute_metrics(preds, labels, "cls")
        # independent recount from an explicit confusion matrix
        cm = np.zeros((4, 4), dtype=int)
        for p, l in zip(preds, labels):
            cm[l, p] += 1
        assert rep.overall_accuracy == np.trace(cm) / cm.sum()
        recalls = [cm[c, c] / cm[c].sum() for c in range(4) if cm[c].sum()]
        assert rep.mean_class_accuracy == pytest.approx(np.mean(recalls), abs=1e-12)

    def test_oa_is_frequency_weighted_recall(self):
        rng = np.random.default_rng(51)
        labels = rng.integers(0, 3, size=150)
        preds = rng.integers(0, 3, size=150)
        rep = compute_metrics(preds, labels, "cls")
        weighted = sum(
            np.mean(labels == c) * rep.per_class[c] for c in rep.per_class
        )
        assert rep.overall_accuracy == pytest.approx(weighted, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            compute_metrics([], [], "cls")

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_metrics([0, 1], [0], "cls")

    def test_unknown_task(self):
        with pytest.raises(ValueError, match="task"):
            compute_metrics([0], [0], "registration")


class TestComputeMetricsSeg:
    def test_all_correct(self):
        rep = compute_metrics(
            [np.array([0, 1, 1])], [np.array([0, 1, 1])], "seg",
            categories=[0], parts_table={0: 2},
        )
        assert rep.mean_iou == 1.0
        assert rep.overall_accuracy == 1.0

    def test_one_part_right_one_wrong(self):
        # part 0 exactly recovered, part 1 never predicted: (1 + 0) / 2
        rep = compute_metrics(
            [np.array([0, 0, 9, 9])], [np.array([0, 0, 1, 1])], "seg",
            categories=[0], parts_table={0: 2},
        )
        assert rep.mean_iou == 0.5

    def test_absent_part_counts_one(self):
        rep = compute_metrics(
            [np.array([0, 0])], [np.array([0, 0])], "seg",
            categories=[0], parts_table={0: 3},
        )
        assert rep.mean_iou == 1.0  # parts 1, 2 absent from both sides

    def test_half_right_single_part(self):
        rep = compute_metrics(
            [np.array([0, 9])], [np.array([0, 0])], "seg",
            categories=[0], parts_table={0: 1},
        )
        assert rep.mean_iou == 0.5  # intersection 1, union 2

    def test_point_permutation_invariance(self):
        rng = np.random.default_rng(52)
        truth = rng.integers(0, 3, size=40)
        pred = rng.integers(0, 3, size=40)
        perm = rng.permutation(40)
        a = compute_metrics([pred], [truth], "seg", categories=[0], parts_table={0: 3})
        b = compute_metrics([pred[perm]], [truth[perm]], "seg", categories=[0], parts_table={0: 3})
        assert a.mean_iou == b.mean_iou
        assert a.overall_accuracy == b.overall_accuracy

    def test_set_overlap_oracle(self):
        rng = np.random.default_rng(53)
        parts_table = {0: 2, 1: 3, 2: 4}
        preds, labels, cats = [], [], []
        for i in range(12):
            cat = int(rng.integers(3))
            n = int(rng.integers(5, 30))
            labels.append(rng.integers(0, parts_table[cat], size=n))
            preds.append(rng.integers(0, parts_table[cat], size=n))
            cats.append(cat)
        rep = compute_metrics(preds, labels, "seg", categories=cats, parts_table=parts_table)
        shape_ious = []
        for p, l, cat in zip(preds, labels, cats):
            per_part = []
            for part in range(parts_table[cat]):
                pset = {i for i, x in enumerate(p) if x == part}
                lset = {i for i, x in enumerate(l) if x == part}
                union = pset | lset
                per_part.append(1.0 if not union else len(pset & lset) / len(union))
            shape_ious.append(sum(per_part) / len(per_part))
        assert rep.mean_iou == pytest.approx(sum(shape_ious) / len(shape_ious), abs=1e-12)

    def test_csv_and_key_values(self):
        rep = compute_metrics([0, 1], [0, 1], "cls")
        assert "overall_accuracy=1.000000" in rep.key_values()
        assert rep.csv().splitlines()[0] == "metric,value"
        seg = compute_metrics([np.array([0])], [np.array([0])], "seg",
                              categories=[0], parts_table={0: 1})
        assert "mean_iou" in seg.csv()


def categorized_dataset(counts: dict[int, int], n_names: int) -> Dataset:
    """counts: category -> number of clouds, all tagged train."""
    rng = np.random.default_rng(54)
    clouds = []
    for cat, n in counts.items():
        for _ in range(n):
            clouds.append(PointCloud(rng.normal(size=(8, 3)), category=cat))
    return Dataset(clouds, ["train"] * len(clouds), [f"c{i}" for i in range(n_names)])


class TestLabelRatioSplit:
    def test_half_of_100(self):
        ds = categorized_dataset({0: 50, 1: 50}, 2)
        labeled, rest = label_ratio_split(ds, 0.5, seed=1)
        assert len(labeled) == 50 and len(rest) == 50

    def test_odd_category_rounds_half_up(self):
        ds = categorized_dataset({0: 5}, 1)
        labeled, rest = label_ratio_split(ds, 0.5, seed=2)
        assert len(labeled) == 3 and len(rest) == 2

    def test_same_seed_identical(self):
        ds = categorized_dataset({0: 10, 1: 10}, 2)
        a1, _ = label_ratio_split(ds, 0.25, seed=3)
        a2, _ = label_ratio_split(ds, 0.25, seed=3)
        assert all(np.array_equal(x.points, y.points) for x, y in zip(a1.clouds, a2.clouds))

    def test_union_and_disjoint(self):
        ds = categorized_dataset({0: 7, 1: 9}, 2)
        labeled, rest = label_ratio_split(ds, 0.25, seed=4)
        key = lambda c: c.points.tobytes()
        all_keys = sorted(key(c) for c in ds.clouds)
        split_keys = sorted([key(c) for c in labeled.clouds] + [key(c) for c in rest.clouds])
        assert all_keys == split_keys
        assert not set(key(c) for c in labeled.clouds) & set(key(c) for c in rest.clouds)

    def test_stratified(self):
        ds = categorized_dataset({0: 20, 1: 20}, 2)
        labeled, _ = label_ratio_split(ds, 0.25, seed=5)
        cats = [c.category for c in labeled.clouds]
        assert cats.count(0) == 5 and cats.count(1) == 5

    def test_keeps_at_least_one_with_warning(self):
        ds = categorized_dataset({0: 3, 1: 20}, 2)
        with pytest.warns(UserWarning, match="keeping 1"):
            labeled, _ = label_ratio_split(ds, 0.1, seed=6)
        cats = [c.category for c in labeled.clouds]
        assert cats.count(0) == 1 and cats.count(1) == 2

    def test_ratio_one_empties_unlabeled(self):
        ds = categorized_dataset({0: 4}, 1)
        labeled, rest = label_ratio_split(ds, 1.0, seed=7)
        assert len(labeled) == 4 and rest is None

    @pytest.mark.parametrize("ratio", [0.0, -0.1, 1.5])
    def test_ratio_bounds(self, ratio):
        ds = categorized_dataset({0: 4}, 1)
        with pytest.raises(ValueError, match="ratio"):
            label_ratio_split(ds, ratio, seed=0)

    def test_missing_category(self):
        rng = np.random.default_rng(55)
        clouds = [PointCloud(rng.normal(size=(8, 3)), category=0),
                  PointCloud(rng.normal(size=(8, 3)))]
        ds = Dataset(clouds, ["train", "train"], ["a"])
        with pytest.raises(ValueError, match="category"):
            label_ratio_split(ds, 0.5, seed=0)


class TestPretrain:
    def test_smoke_and_history(self):
        ds = two_class_dataset(4, 0, 24, seed=8)
        cfg = tiny_pretrain_config()
        ckpt, history = pretrain(ds, cfg)
        assert len(history) == cfg.epochs * 2  # ceil(4 / 2) steps per epoch
        assert all(np.isfinite(r.loss_total) for r in history)
        init_shapes = init_pretrain_state(cfg)
        assert set(ckpt.params) == set(init_shapes)
        assert ckpt.adam_step_count == len(history)
        assert ckpt.epoch == cfg.epochs

    def test_log_lines_match_history(self):
        ds = two_class_dataset(3, 0, 24, seed=9)
        lines = []
        cfg = tiny_pretrain_config(epochs=1)
        _, history = pretrain(ds, cfg, log=lines.append)
        assert lines == [r.line() for r in history]
        assert all(len(l.split(" ")) == 6 for l in lines)

    def test_deterministic_same_seed(self, tmp_path):
        ds = two_class_dataset(4, 0, 24, seed=10)
        cfg = tiny_pretrain_config(epochs=1, deterministic=True)
        out = []
        for tag in ("a", "b"):
            ckpt, history = pretrain(ds, cfg, log=None)
            p = tmp_path / f"{tag}.mdck"
            save_checkpoint(p, ckpt)
            out.append((p.read_bytes(), [r.line() for r in history]))
        assert out[0][0] == out[1][0]
        assert out[0][1] == out[1][1]

    def test_step_zero_matches_initial_checkpoint(self):
        ds = two_class_dataset(4, 0, 24, seed=11)
        cfg = tiny_pretrain_config(epochs=1)
        _, history = pretrain(ds, cfg)
        ch, co, tot = recompute_step_loss(ds, cfg, init_pretrain_state(cfg), 0, 0)
        assert ch == history[0].loss_chamfer
        assert co == history[0].loss_contrastive
        assert tot == history[0].loss_total

    def test_lambda_zero_contrastive_column(self):
        ds = two_class_dataset(4, 0, 24, seed=12)
        _, history = pretrain(ds, tiny_pretrain_config(epochs=1, lambda_=0.0, batch_size=1))
        assert all(r.loss_contrastive == 0.0 for r in history)
        assert all(r.loss_total == r.loss_chamfer for r in history)

    def test_seg_branch_runs(self):
        ds = two_class_dataset(4, 0, 24, seed=13)
        cfg = tiny_pretrain_config(encoder=TINY_SEG_ENC)
        ckpt, history = pretrain(ds, cfg)
        assert "enc.catfuse.w" in ckpt.params
        assert all(np.isfinite(r.loss_total) for r in history)

    def test_save_hook(self):
        ds = two_class_dataset(4, 0, 24, seed=14)
        calls = []
        pretrain(ds, tiny_pretrain_config(epochs=2, save_interval=1),
                 save_hook=lambda e, c: calls.append((e, c)))
        assert [e for e, _ in calls] == [0, 1]
        assert calls[0][1].epoch == 1

    def test_too_small_dataset(self):
        ds = two_class_dataset(1, 1, 24, seed=15)  # only one train cloud
        with pytest.raises(ValueError, match="at least 2"):
            pretrain(ds, tiny_pretrain_config())

    def test_contrastive_needs_batch(self):
        ds = two_class_dataset(4, 0, 24, seed=16)
        with pytest.raises(ValueError, match="batch_size"):
            pretrain(ds, tiny_pretrain_config(batch_size=1, lambda_=1.0))

    def test_overfit_pair_freezes_batch(self):
        ds = two_class_dataset(4, 0, 24, seed=17)
        cfg = tiny_pretrain_config(batch_size=1, lambda_=0.0, overfit_pair=(0, 1))
        b1 = assemble_batch(ds, cfg, epoch=0, step=0)
        b2 = assemble_batch(ds, cfg, epoch=3, step=1)
        assert np.array_equal(b1[0][0].mixed.points, b2[0][0].mixed.points)
        assert np.array_equal(b1[0][0].cond_a, b2[0][0].cond_a)

    def test_overfit_loss_non_increasing_smoothed(self):
        ds = two_class_dataset(2, 0, 32, seed=18)
        cfg = tiny_pretrain_config(
            batch_size=1, lambda_=0.0, overfit_pair=(0, 1),
            epochs=30, lr0=0.02, points_per_cloud=32,
        )
        _, history = pretrain(ds, cfg)  # 30 epochs x 2 steps = 60
        losses = np.array([r.loss_total for r in history])
        windows = losses.reshape(3, 20).mean(axis=1)
        assert windows[1] <= windows[0] + 1e-12
        assert windows[2] <= windows[1] + 1e-12


class TestFinetuneCls:
    def test_separable_two_class(self):
        ds = two_class_dataset(8, 4, 48, seed=19)
        cfg = TrainConfig(
            batch_size=4, epochs=30, lr0=0.02, k=4, points_per_cloud=48,
            seed=20, augment=False, encoder=TINY_CLS_ENC, decoder=TINY_DEC,
        )
        ckpt, report, history = finetune_cls(ds, None, cfg)
        assert report.overall_accuracy == 1.0
        assert history[-1].loss_total < history[0].loss_total
        assert "head.w" in ckpt.params

    def test_pretrained_init_adopts_encoder(self):
        ds = two_class_dataset(4, 2, 24, seed=21)
        pre_ckpt, _ = pretrain(ds, tiny_pretrain_config(epochs=1))
        cfg = TrainConfig(batch_size=2, epochs=1, lr0=0.01, k=4,
                          points_per_cloud=24, seed=22, augment=False,
                          encoder=TINY_CLS_ENC, decoder=TINY_DEC)
        # one-epoch run starting from the pretrained encoder must differ
        # from scratch at the first step (different initial encoder)
        _, _, hist_pre = finetune_cls(ds, pre_ckpt, cfg)
        _, _, hist_scratch = finetune_cls(ds, None, cfg)
        assert hist_pre[0].loss_total != hist_scratch[0].loss_total

    def test_scratch_and_pretrained_share_schedule(self):
        cfg = TrainConfig(batch_size=2, epochs=1, k=4, points_per_cloud=24,
                          seed=23, encoder=TINY_CLS_ENC, decoder=TINY_DEC)
        before = asdict(cfg)
        ds = two_class_dataset(4, 2, 24, seed=23)
        finetune_cls(ds, None, cfg)
        assert asdict(cfg) == before  # same hyperparameters serve both arms

    def test_shape_table_mismatch_from_seg_checkpoint(self):
        ds = two_class_dataset(4, 2, 24, seed=24)
        seg_ckpt, _ = pretrain(ds, tiny_pretrain_config(encoder=TINY_SEG_ENC))
        cfg = TrainConfig(batch_size=2, epochs=1, k=4, points_per_cloud=24,
                          seed=25, encoder=TINY_CLS_ENC, decoder=TINY_DEC)
        with pytest.raises(ShapeTableMismatchError):
            finetune_cls(ds, seg_ckpt, cfg)

    def test_encoder_architecture_preserved(self):
        from cloudmix.dataio import check_shape_table, filter_params

        ds = two_class_dataset(4, 2, 24, seed=26)
        cfg = TrainConfig(batch_size=2, epochs=1, k=4, points_per_cloud=24,
                          seed=27, augment=False, encoder=TINY_CLS_ENC, decoder=TINY_DEC)
        ckpt, _, _ = finetune_cls(ds, None, cfg)
        from cloudmix.encoder import init_encoder_params
        fresh = init_encoder_params(cfg.encoder, np.random.default_rng(0))
        check_shape_table(filter_params(fresh, "enc."), filter_params(ckpt.params, "enc."))

    def test_wrong_branch(self):
        ds = two_class_dataset(4, 2, 24, seed=28)
        cfg = TrainConfig(batch_size=2, epochs=1, k=4, points_per_cloud=24,
                          encoder=TINY_SEG_ENC)
        with pytest.raises(ValueError, match="classification-branch"):
            finetune_cls(ds, None, cfg)

    def test_checkpoint_round_trip_resumes_eval(self, tmp_path):
        ds = two_class_dataset(4, 2, 24, seed=29)
        cfg = TrainConfig(batch_size=2, epochs=1, k=4, points_per_cloud=24,
                          seed=30, augment=False, encoder=TINY_CLS_ENC, decoder=TINY_DEC)
        ckpt, report, _ = finetune_cls(ds, None, cfg)
        p = tmp_path / "c.mdck"
        save_checkpoint(p, ckpt)
        again = evaluate_cls(ds, load_checkpoint(p).params, cfg)
        assert again.overall_accuracy == report.overall_accuracy


class TestFinetuneSeg:
    def seg_dataset(self, n_train=6, n_test=2, n=32, seed=31):
        return make_synthetic_dataset(n_train, n_test, n, seed, kinds=("cylinder", "torus"))

    def test_smoke(self):
        ds = self.seg_dataset()
        cfg = TrainConfig(batch_size=3, epochs=2, lr0=0.01, k=4, points_per_cloud=24,
                          seed=32, augment=False, encoder=TINY_SEG_ENC, decoder=TINY_DEC)
        ckpt, report, history = finetune_seg(ds, None, cfg)
        assert report.task == "seg"
        assert 0.0 <= report.mean_iou <= 1.0
        assert 0.0 <= report.overall_accuracy <= 1.0
        assert "head.w" in ckpt.params and ckpt.params["head.w"].shape[1] == 2

    def test_parts_table(self):
        ds = self.seg_dataset()
        assert parts_table_of(ds) == {0: 2, 1: 2}

    def test_missing_part_labels(self):
        rng = np.random.default_rng(33)
        clouds = [PointCloud(rng.normal(size=(16, 3)), category=0),
                  PointCloud(rng.normal(size=(16, 3)), category=1)]
        ds = Dataset(clouds, ["train", "test"], ["a", "b"])
        cfg = TrainConfig(batch_size=1, epochs=1, k=4, points_per_cloud=16,
                          encoder=TINY_SEG_ENC, decoder=TINY_DEC)
        with pytest.raises(ValueError, match="part labels"):
            finetune_seg(ds, None, cfg)

    def test_wrong_branch(self):
        ds = self.seg_dataset()
        cfg = TrainConfig(batch_size=2, epochs=1, k=4, encoder=TINY_CLS_ENC)
        with pytest.raises(ValueError, match="segmentation-branch"):
            finetune_seg(ds, None, cfg)

    def test_pretrained_init_shape_checked(self):
        ds = self.seg_dataset()
        pre, _ = pretrain(ds, tiny_pretrain_config(encoder=TINY_SEG_ENC))
        cfg = TrainConfig(batch_size=3, epochs=1, lr0=0.01, k=4, points_per_cloud=24,
                          seed=34, augment=False, encoder=TINY_SEG_ENC, decoder=TINY_DEC)
        ckpt, report, _ = finetune_seg(ds, pre, cfg)
        assert report.mean_iou is not None


class TestEmbed:
    def test_rows_per_cloud(self):
        ds = two_class_dataset(3, 1, 24, seed=35)
        cfg = tiny_pretrain_config()
        params = init_pretrain_state(cfg)
        emb = embed_dataset(ds, params, cfg)
        assert emb.shape == (4, TINY_CLS_ENC.embedding_dim)
        assert np.all(np.isfinite(emb))
