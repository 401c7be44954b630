"""Command-line entry point for the full pipeline.

Subcommands: pretrain, finetune-cls, finetune-seg, eval, embed, mix.
Value precedence is flags > config file > built-in defaults, the effective
configuration is echoed line by line, and exit codes are 0 (ok), 2 (usage),
3 (data), 4 (numeric).

Thread environment variables are set from a light pre-parse of argv before
anything imports numpy, so --threads / --deterministic actually bite.
"""

from __future__ import annotations

import argparse
import os
import sys


class UsageError(Exception):
    pass


# ------------------------------------------------------------ thread setup


def _set_thread_env(argv: list[str]) -> None:
    threads = None
    deterministic = False
    for i, arg in enumerate(argv):
        if arg == "--deterministic":
            deterministic = True
        elif arg == "--threads" and i + 1 < len(argv):
            try:
                threads = int(argv[i + 1])
            except ValueError:
                pass  # the real parser reports this
        elif arg.startswith("--threads="):
            try:
                threads = int(arg.split("=", 1)[1])
            except ValueError:
                pass
    if deterministic:
        threads = 1
    if threads is None:
        threads = os.cpu_count() or 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        if deterministic:
            os.environ[var] = "1"
        else:
            os.environ.setdefault(var, str(threads))


# ----------------------------------------------------- flag and file parsing


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in str(text).split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes"):
        return True
    if str(text).lower() in ("0", "false", "no"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


_CONVERTERS = {
    "epochs": int,
    "batch": int,
    "lr": float,
    "lambda_": float,
    "seed": int,
    "k": int,
    "points": int,
    "threads": int,
    "save_interval": int,
    "deterministic": _bool,
    "augment": _bool,
    "branch": str,
    "embedding_dim": int,
    "cls_channels": _csv_ints,
    "seg_channels": _csv_ints,
    "widths": _csv_ints,
    "dropout": float,
    "denoise_hidden": int,
    "label_ratio": float,
}

_FILE_KEY_TO_DEST = {"lambda": "lambda_"}


def _base_defaults(task: str) -> dict:
    return {
        "epochs": {"pretrain": 200, "finetune-cls": 250, "finetune-seg": 200}[task],
        "batch": 12,
        "lr": 0.1,
        "lambda_": 1.0,
        "seed": 0,
        "k": 20,
        "points": 1024,
        "save_interval": 0,
        "deterministic": False,
        "augment": True,
        "branch": "segmentation" if task == "finetune-seg" else "classification",
        "embedding_dim": 1024,
        "cls_channels": (64, 64, 128, 256),
        "seg_channels": (64, 64, 64),
        "widths": (512, 256, 128),
        "dropout": 0.5,
        "denoise_hidden": 64,
    }


def _read_config_file(path: str, allowed: set[str]) -> dict:
    try:
        text = open(path).read()
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}") from None
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        dest = _FILE_KEY_TO_DEST.get(key, key.replace("-", "_"))
        if dest not in allowed:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[dest] = _CONVERTERS[dest](value)
    return values


def _merge_config(args: argparse.Namespace, task: str) -> dict:
    merged = _base_defaults(task)
    allowed = set(merged)
    if task in ("finetune-cls", "finetune-seg"):
        allowed.add("label_ratio")
    if getattr(args, "config", None):
        merged.update(_read_config_file(args.config, allowed))
    for dest in allowed:
        value = getattr(args, dest, None)
        if value is not None:
            merged[dest] = _CONVERTERS[dest](value) if isinstance(value, str) else value
    if getattr(args, "no_augment", None):
        merged["augment"] = False
    return merged


def _echo_config(merged: dict, extra: dict) -> None:
    show = dict(merged)
    show.update(extra)
    if "lambda_" in show:
        show["lambda"] = show.pop("lambda_")
    for key in sorted(show):
        value = show[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        print(f"config {key}={value}")


def _train_config(merged: dict, n_categories: int):
    from .decoder import DecoderConfig
    from .encoder import EncoderConfig
    from .training import TrainConfig

    branch = merged["branch"]
    encoder = EncoderConfig(
        branch=branch,
        k=merged["k"],
        cls_channels=merged["cls_channels"],
        seg_channels=merged["seg_channels"],
        embedding_dim=merged["embedding_dim"],
        num_categories=n_categories if branch == "segmentation" else 0,
    )
    decoder = DecoderConfig(
        widths=merged["widths"],
        dropout_p=merged["dropout"],
        denoise_hidden=merged["denoise_hidden"],
    )
    return TrainConfig(
        batch_size=merged["batch"],
        epochs=merged["epochs"],
        lr0=merged["lr"],
        k=merged["k"],
        points_per_cloud=merged["points"],
        seed=merged["seed"],
        lambda_=merged["lambda_"],
        deterministic=merged["deterministic"],
        augment=merged["augment"],
        save_interval=merged["save_interval"],
        encoder=encoder,
        decoder=decoder,
    )


# -------------------------------------------------------------- data source


def _parse_synthetic_spec(spec: str, seed: int):
    from .dataio import SYNTH_KINDS

    out = {"train": 12, "test": 4, "points": 128, "kinds": tuple(SYNTH_KINDS)}
    if spec != "default":
        for part in spec.split(","):
            if "=" not in part:
                raise UsageError(f"bad synthetic spec entry {part!r}")
            key, value = part.split("=", 1)
            if key in ("train", "test", "points"):
                out[key] = int(value)
            elif key == "kinds":
                kinds = tuple(value.split("+"))
                unknown = set(kinds) - set(SYNTH_KINDS)
                if unknown:
                    raise UsageError(f"unknown synthetic kinds {sorted(unknown)}")
                out["kinds"] = kinds
            else:
                raise UsageError(f"unknown synthetic spec key {key!r}")
    return out


def _resolve_dataset(args: argparse.Namespace, seed: int):
    from .dataio import load_dataset_dir, make_synthetic_dataset

    if getattr(args, "data", None):
        return load_dataset_dir(args.data)
    if getattr(args, "synthetic", None):
        spec = _parse_synthetic_spec(args.synthetic, seed)
        return make_synthetic_dataset(
            spec["train"], spec["test"], spec["points"], seed, kinds=spec["kinds"]
        )
    raise UsageError("one of --data or --synthetic is required")


# -------------------------------------------------------------- subcommands


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", metavar="DIR", help="dataset directory (categories.txt + train/ test/)")
    p.add_argument("--synthetic", metavar="SPEC",
                   help="'default' or train=N,test=N,points=N,kinds=a+b (default spec: train=12,test=4,points=128)")


def _add_run_flags(p: argparse.ArgumentParser, task: str) -> None:
    d = _base_defaults(task)
    p.add_argument("--config", metavar="FILE", help="key=value config file (flags win over file)")
    p.add_argument("--epochs", type=int, help=f"training epochs (default: {d['epochs']})")
    p.add_argument("--batch", type=int, help=f"minibatch size (default: {d['batch']})")
    p.add_argument("--lr", type=float, help=f"initial learning rate, cosine-annealed (default: {d['lr']})")
    p.add_argument("--lambda", dest="lambda_", type=float, metavar="LAMBDA",
                   help="contrastive loss weight; 0 disables the term (default: 1.0)")
    p.add_argument("--seed", type=int, help="random seed (default: 0)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded bit-reproducible mode (default: off)")
    p.add_argument("--threads", type=int, help="BLAS thread count (default: machine cores; 1 when deterministic)")
    p.add_argument("--k", type=int, help=f"neighbors per point (default: {d['k']})")
    p.add_argument("--points", type=int, help=f"points per cloud after subsampling (default: {d['points']})")
    p.add_argument("--save-interval", dest="save_interval", type=int,
                   help="also checkpoint every this many epochs (default: 0, end only)")
    p.add_argument("--no-augment", dest="no_augment", action="store_true", default=None,
                   help="disable jitter/scale augmentation (default: augmentation on)")
    p.add_argument("--branch", choices=("classification", "segmentation"),
                   help=f"encoder branch (default: {d['branch']})")
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int,
                   help=f"embedding width E (default: {d['embedding_dim']})")
    p.add_argument("--cls-channels", dest="cls_channels",
                   help="EdgeConv widths for classification, comma-separated (default: 64,64,128,256)")
    p.add_argument("--seg-channels", dest="seg_channels",
                   help="EdgeConv widths for segmentation, comma-separated (default: 64,64,64)")
    p.add_argument("--widths", help="decoder unit widths, comma-separated (default: 512,256,128)")
    p.add_argument("--dropout", type=float, help=f"decoder fusion dropout (default: {d['dropout']})")
    p.add_argument("--denoise-hidden", dest="denoise_hidden", type=int,
                   help=f"denoise block hidden width (default: {d['denoise_hidden']})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudmix",
        description="Self-supervised point-cloud pre-training by mixing and disentangling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    _add_data_flags(p)
    _add_run_flags(p, "pretrain")
    p.add_argument("--out", required=True, metavar="CKPT", help="checkpoint output path; step log goes to CKPT.log")

    for task in ("finetune-cls", "finetune-seg"):
        p = sub.add_parser(task, help=f"{task.split('-')[1]} fine-tuning")
        _add_data_flags(p)
        _add_run_flags(p, task)
        p.add_argument("--init", required=True, metavar="CKPT|scratch",
                       help="pre-training checkpoint to start from, or 'scratch'")
        p.add_argument("--label-ratio", dest="label_ratio", type=float, metavar="R",
                       help="stratified labeled fraction of the train split (default: 1.0, all labels)")
        p.add_argument("--out", required=True, metavar="CKPT",
                       help="checkpoint output path; log to CKPT.log, metrics CSV to CKPT.metrics.csv")

    p = sub.add_parser("eval", help="recompute metrics from a checkpoint")
    _add_data_flags(p)
    p.add_argument("--ckpt", required=True, help="fine-tuned checkpoint to evaluate")
    p.add_argument("--threads", type=int, help="BLAS thread count (default: machine cores)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded mode (default: off)")

    p = sub.add_parser("embed", help="export one embedding row per cloud")
    _add_data_flags(p)
    p.add_argument("--ckpt", required=True, help="checkpoint providing the encoder")
    p.add_argument("--out", required=True, metavar="CSV", help="output CSV path")
    p.add_argument("--threads", type=int, help="BLAS thread count (default: machine cores)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded mode (default: off)")

    p = sub.add_parser("mix", help="mix two clouds and export PLY artifacts")
    p.add_argument("--a", required=True, metavar="FILE", help="first cloud (.pcd or .pcdb)")
    p.add_argument("--b", required=True, metavar="FILE", help="second cloud (.pcd or .pcdb)")
    p.add_argument("--out", required=True, metavar="PLY", help="mixed cloud output")
    p.add_argument("--ckpt", help="pre-training checkpoint for reconstructions")
    p.add_argument("--weights", action="store_true", default=None,
                   help="with --ckpt: write reconstructions shaded by denoise weights (default: off)")
    p.add_argument("--category", type=int,
                   help="category id for segmentation-branch checkpoints (default: cloud a's)")
    p.add_argument("--seed", type=int, help="random seed for mixing (default: 0)")
    p.add_argument("--threads", type=int, help="BLAS thread count (default: machine cores)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded mode (default: off)")
    return parser


# ------------------------------------------------------------------ actions


def _require_finite(history) -> None:
    import math

    from .autodiff import NumericError

    if any(not math.isfinite(r.loss_total) for r in history):
        raise NumericError("non-finite loss during training")


def _cmd_pretrain(args) -> int:
    from .dataio import save_checkpoint
    from .training import pretrain

    merged = _merge_config(args, "pretrain")
    dataset = _resolve_dataset(args, merged["seed"])
    config = _train_config(merged, len(dataset.category_names))
    _echo_config(merged, {"out": args.out, "data": args.data or f"synthetic:{args.synthetic}"})

    def hook(epoch, ckpt):
        save_checkpoint(f"{args.out}.e{epoch + 1}", ckpt)

    with open(f"{args.out}.log", "w") as logf:
        ckpt, history = pretrain(
            dataset, config,
            log=lambda line: print(line, file=logf),
            save_hook=hook if merged["save_interval"] else None,
        )
    _require_finite(history)
    save_checkpoint(args.out, ckpt)
    print(f"wrote {args.out} ({len(history)} steps, final loss {history[-1].loss_total:.6g})")
    return 0


def _cmd_finetune(args, task: str) -> int:
    from .dataio import load_checkpoint, save_checkpoint
    from .training import apply_label_ratio, finetune_cls, finetune_seg

    merged = _merge_config(args, task)
    dataset = _resolve_dataset(args, merged["seed"])
    config = _train_config(merged, len(dataset.category_names))
    init = None if args.init == "scratch" else load_checkpoint(args.init)
    _echo_config(merged, {
        "out": args.out,
        "init": args.init,
        "data": args.data or f"synthetic:{args.synthetic}",
    })
    if merged.get("label_ratio") is not None:
        dataset = apply_label_ratio(dataset, merged["label_ratio"], merged["seed"])

    run = finetune_cls if task == "finetune-cls" else finetune_seg
    with open(f"{args.out}.log", "w") as logf:
        ckpt, report, history = run(dataset, init, config, log=lambda line: print(line, file=logf))
    _require_finite(history)
    save_checkpoint(args.out, ckpt)
    with open(f"{args.out}.metrics.csv", "w") as f:
        f.write(report.csv())
    print(report.key_values(), end="")
    return 0


def _cmd_eval(args) -> int:
    from .dataio import load_checkpoint
    from .training import config_from_snapshot, evaluate_cls, evaluate_seg

    ckpt = load_checkpoint(args.ckpt)
    config = config_from_snapshot(ckpt.config)
    dataset = _resolve_dataset(args, config.seed)
    if "head.w" not in ckpt.params:
        raise ValueError("checkpoint has no classifier head; run a finetune subcommand first")
    if config.encoder.branch == "segmentation":
        report = evaluate_seg(dataset, ckpt.params, config)
    else:
        report = evaluate_cls(dataset, ckpt.params, config)
    print(report.key_values(), end="")
    return 0


def _cmd_embed(args) -> int:
    from .dataio import load_checkpoint
    from .training import config_from_snapshot, embed_dataset

    ckpt = load_checkpoint(args.ckpt)
    config = config_from_snapshot(ckpt.config)
    dataset = _resolve_dataset(args, config.seed)
    emb = embed_dataset(dataset, ckpt.params, config)
    with open(args.out, "w") as f:
        f.write("category," + ",".join(f"e{i}" for i in range(emb.shape[1])) + "\n")
        for cloud, row in zip(dataset.clouds, emb):
            cat = -1 if cloud.category is None else cloud.category
            f.write(f"{cat}," + ",".join(f"{v:.9g}" for v in row) + "\n")
    print(f"wrote {args.out} ({emb.shape[0]} rows, E={emb.shape[1]})")
    return 0


def _cmd_mix(args) -> int:
    import numpy as np

    from .dataio import load_checkpoint, read_cloud, write_ply
    from .decoder import decode, denoise_weights
    from .geom import mix, subsample
    from .training import config_from_snapshot

    seed = args.seed if args.seed is not None else 0
    a = read_cloud(args.a)
    b = read_cloud(args.b)
    rng = np.random.default_rng([seed, 0])
    n = min(a.n_points, b.n_points)
    if a.n_points > n:
        a = subsample(a, n, rng)
    if b.n_points > n:
        b = subsample(b, n, rng)
    sample = mix(a, b, rng)
    write_ply(args.out, sample.mixed.points)
    print(f"wrote {args.out} ({n} vertices)")

    if args.weights:
        if not args.ckpt:
            raise UsageError("--weights needs --ckpt for the model")
        ckpt = load_checkpoint(args.ckpt)
        config = config_from_snapshot(ckpt.config)
        from .training import _embed_mixed  # same path as training

        category = args.category if args.category is not None else a.category
        f_emb = _embed_mixed(sample, category, config, ckpt.params)
        stem = args.out[:-4] if args.out.endswith(".ply") else args.out
        for tag, cond in (("a", sample.cond_a), ("b", sample.cond_b)):
            recon = decode(f_emb, cond, config.decoder, ckpt.params)
            w = denoise_weights(recon, ckpt.params)
            path = f"{stem}_recon_{tag}.ply"
            write_ply(path, recon.data * w.data, grayscale=w.data)
            print(f"wrote {path} ({n} vertices)")
    return 0


# --------------------------------------------------------------------- main


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _set_thread_env(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse prints its own message
        return int(e.code or 0)
    try:
        if args.command == "pretrain":
            return _cmd_pretrain(args)
        if args.command in ("finetune-cls", "finetune-seg"):
            return _cmd_finetune(args, args.command)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "embed":
            return _cmd_embed(args)
        if args.command == "mix":
            return _cmd_mix(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ArithmeticError as e:  # NumericError and friends
        print(f"numeric error: {e}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as e:  # data and format problems
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
