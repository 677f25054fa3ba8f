"""Command-line interface.

Subcommands: synth (build a synthetic dataset), train, eval, report (model
complexity), ablate (the 8-way component toggle grid). Every command is
deterministic given --seed; the QMX_SEED environment variable overrides
--seed. Exit codes: 0 ok, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import SplitSpec, load_dataset, make_splits, save_dataset, synth_shapes_dataset
from .errors import ConfigError, DataError, NumericError
from .losses import LossWeights
from .metrics import aggregate, compute_report
from .training import (TrainConfig, evaluate_model, fit, load_fit_checkpoint,
                       read_history, save_fit_checkpoint, write_history)


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    try:
        from importlib.metadata import version
        return version("qmaxseg")
    except Exception:
        return "unknown"


def resolve_seed(seed: int) -> int:
    env = os.environ.get("QMX_SEED")
    return int(env) if env else seed


def write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                   outputs: list[str], started: str):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": version_string(),
        "started_utc": started,
        "finished_utc": _now(),
        "outputs": outputs,
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = _now()
    seed = resolve_seed(args.seed)
    if args.classes < 2:
        raise ConfigError(f"--classes must be >= 2, got {args.classes}")
    out = Path(args.out)
    samples = synth_shapes_dataset(args.n, args.size, args.classes, seed)
    save_dataset(samples, out)
    write_manifest(out, "synth",
                   {"n": args.n, "size": args.size, "classes": args.classes},
                   seed, [f"{sub}/" for sub in ("images", "scribbles", "edges", "masks")]
                   + ["meta.csv"], started)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_config(args, seed) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        weight_decay=args.wd,
        epochs=args.epochs,
        batch_size=args.batch_size,
        loss_weights=LossWeights(args.lambda1, args.lambda2, args.lambda3),
        dual_decoder=not args.no_dual,
        query=not args.no_query,
        edge=not args.no_edge,
        seed=seed,
        image_size=args.size,
        num_classes=args.classes,
        base_channels=args.base_channels,
        depths=tuple(int(d) for d in args.depths.split(",")),
        d_fpn=args.d_fpn,
    )


def _load_splits(args, seed):
    samples = load_dataset(args.data, size=args.size, num_classes=args.classes)
    if args.fold >= args.folds:
        raise ConfigError(f"--fold {args.fold} must be < --folds {args.folds}")
    spec = SplitSpec(fold_count=args.folds, fold_index=args.fold)
    return make_splits(samples, spec, seed)


def _run_training(cfg: TrainConfig, train, val, out: Path, quiet=False):
    def log(rec):
        if not quiet:
            print(f"epoch {rec.epoch:3d}  loss {rec.loss_total:.4f} "
                  f"(ssl {rec.loss_ssl:.4f} psl {rec.loss_psl:.4f} "
                  f"esl {rec.loss_esl:.4f})  val dsc {rec.val_dsc:.4f}  "
                  f"lr {rec.lr:.2e}")

    result = fit(cfg, train, val, log_fn=log)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.npz"
    save_fit_checkpoint(ckpt_path, result, cfg)
    write_history(out / "history.csv", result.history)
    return result, ckpt_path


def cmd_train(args) -> int:
    started = _now()
    seed = resolve_seed(args.seed)
    cfg = _train_config(args, seed)
    train, val, _ = _load_splits(args, seed)
    out = Path(args.out)
    result, ckpt_path = _run_training(cfg, train, val, out)
    write_manifest(out, "train", cfg.to_dict(), seed,
                   ["checkpoint.npz", "history.csv"], started)
    print(f"best epoch {result.best_epoch} val dsc {result.best_val_dsc:.4f}; "
          f"checkpoint at {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _save_label_png(path, labels):
    from PIL import Image
    Image.fromarray(labels.astype(np.uint8)).save(path)


def _plot_curves(history, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    epochs = [r.epoch for r in history]
    for key, label in (("loss_total", "total"), ("loss_ssl", "scribble"),
                       ("loss_psl", "pseudo"), ("loss_esl", "edge")):
        ax1.plot(epochs, [getattr(r, key) for r in history], label=label)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [r.val_dsc for r in history], label="val DSC")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("DSC")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_panel(rows, path):
    """rows: list of (image, scribble_labels, pred, dense_or_none)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(rows)
    fig, axes = plt.subplots(n, 4, figsize=(10, 2.5 * n), squeeze=False)
    titles = ["image", "scribble", "prediction", "dense GT"]
    for i, (img, scrib, pred, dense) in enumerate(rows):
        panels = [img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0),
                  scrib, pred, dense]
        for j, panel in enumerate(panels):
            ax = axes[i][j]
            if panel is None:
                ax.axis("off")
                continue
            cmap = "gray" if j == 0 else "viridis"
            ax.imshow(panel, cmap=cmap, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(titles[j])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval(args) -> int:
    import torch

    started = _now()
    seed = resolve_seed(args.seed)
    model, cfg, meta = load_fit_checkpoint(args.checkpoint)
    samples = load_dataset(args.data, size=cfg.image_size,
                           num_classes=cfg.num_classes)
    if args.split != "all":
        if args.fold >= args.folds:
            raise ConfigError(f"--fold {args.fold} must be < --folds {args.folds}")
        spec = SplitSpec(fold_count=args.folds, fold_index=args.fold)
        train, val, test = make_splits(samples, spec, seed)
        samples = {"train": train, "val": val, "test": test}[args.split]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "predictions").mkdir(exist_ok=True)

    outputs = ["predictions/"]
    reports = []
    panel_rows = []
    with torch.no_grad():
        for s in samples:
            images = torch.from_numpy(s.image[None])
            pred = model(images).y1.argmax(dim=1)[0].numpy()
            _save_label_png(out / "predictions" / f"{s.id}.png", pred)
            if s.dense_gt is not None:
                reports.append(compute_report(pred, s.dense_gt,
                                              cfg.num_classes, s.spacing))
            if len(panel_rows) < args.panel:
                panel_rows.append((s.image, s.scribble.labels, pred, s.dense_gt))

    if reports:
        summary = aggregate(reports)
        flat = summary.to_flat_dict()
        with open(out / "report.json", "w") as fh:
            json.dump(flat, fh, indent=2, sort_keys=True)
        with open(out / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for k in sorted(flat):
                writer.writerow([k, flat[k]])
        outputs += ["report.json", "report.csv"]
        print(f"evaluated {len(reports)} samples: "
              f"dsc.avg={flat['dsc.avg']:.4f} hd95.avg={flat['hd95.avg']:.4f}")
    else:
        print("warning: no dense masks found; metrics skipped, predictions written",
              file=sys.stderr)

    history_path = Path(args.checkpoint).parent / "history.csv"
    if history_path.exists():
        _plot_curves(read_history(history_path), out / "curves.png")
        outputs.append("curves.png")
    if panel_rows:
        _plot_panel(panel_rows, out / "panel.png")
        outputs.append("panel.png")

    write_manifest(out, "eval",
                   {"checkpoint": str(args.checkpoint), "split": args.split,
                    "train_config": meta.get("train_config", {})},
                   seed, outputs, started)
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    from .complexity import complexity_report
    from .model import QMaxSeg

    if args.checkpoint:
        model, cfg, _ = load_fit_checkpoint(args.checkpoint)
        input_size = cfg.image_size
    else:
        seed = resolve_seed(args.seed)
        import torch
        torch.manual_seed(seed)
        cfg = TrainConfig(
            image_size=args.size, num_classes=args.classes,
            base_channels=args.base_channels,
            depths=tuple(int(d) for d in args.depths.split(",")))
        model = QMaxSeg(cfg.model_config())
        input_size = args.size
    rep = complexity_report(model, input_size, trials=args.trials)
    macs = rep["macs"]
    print(f"parameters: {rep['params']:,}")
    print(f"macs total: {macs['total'] / 1e9:.2f}G "
          f"(conv {macs['conv'] / 1e9:.2f}G, linear {macs['linear'] / 1e9:.2f}G, "
          f"attention {macs['attention'] / 1e9:.2f}G)")
    print(f"inference latency: {rep['latency_mean_s'] * 1e3:.1f} ms "
          f"+/- {rep['latency_std_s'] * 1e3:.1f} ms over {rep['trials']} trials")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rep, fh, indent=2, sort_keys=True)
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def toggle_grid():
    """The 8 component combinations, single-decoder rows first."""
    rows = []
    for dual in (False, True):
        for query, edge in ((False, False), (False, True), (True, False), (True, True)):
            rows.append({"dual_decoder": dual, "query": query, "edge": edge})
    return rows


def cmd_ablate(args) -> int:
    started = _now()
    seed = resolve_seed(args.seed)
    base = _train_config(args, seed)
    train, val, test = _load_splits(args, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, toggles in enumerate(toggle_grid()):
        cfg = TrainConfig.from_dict({**base.to_dict(), **toggles})
        run_dir = out / f"combo_{i}"
        result, _ = _run_training(cfg, train, val, run_dir, quiet=True)
        report = evaluate_model(result.model, test or val, cfg.num_classes)
        rows.append({**toggles, "dsc_avg": report.dsc_avg,
                     "hd95_avg": report.hd95_avg})
        print(f"combo {i}: dual={toggles['dual_decoder']} "
              f"query={toggles['query']} edge={toggles['edge']} "
              f"-> dsc {report.dsc_avg:.4f} hd95 {report.hd95_avg:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out, "ablate", base.to_dict(), seed,
                   [f"combo_{i}/" for i in range(8)] + ["ablation.csv"], started)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--epochs", type=int, default=200, help="training epochs (default 200)")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate (default 1e-3)")
    p.add_argument("--wd", type=float, default=0.01, help="weight decay (default 0.01)")
    p.add_argument("--batch-size", type=int, default=8, help="batch size (default 8)")
    p.add_argument("--lambda1", type=float, default=1.0,
                   help="scribble loss weight (default 1)")
    p.add_argument("--lambda2", type=float, default=0.5,
                   help="pseudo-label loss weight (default 0.5)")
    p.add_argument("--lambda3", type=float, default=0.2,
                   help="edge loss weight (default 0.2)")
    p.add_argument("--no-dual", action="store_true",
                   help="disable the auxiliary decoder head")
    p.add_argument("--no-query", action="store_true",
                   help="disable query-guided refinement")
    p.add_argument("--no-edge", action="store_true",
                   help="disable the edge enhancement branch")
    p.add_argument("--fold", type=int, default=0, help="validation fold index")
    p.add_argument("--folds", type=int, default=5, help="fold count (default 5)")
    p.add_argument("--seed", type=int, default=0, help="run seed (QMX_SEED overrides)")
    p.add_argument("--size", type=int, default=256, help="square input size (default 256)")
    p.add_argument("--classes", type=int, default=4, help="number of classes incl. background")
    p.add_argument("--base-channels", type=int, default=96, help="encoder base width")
    p.add_argument("--depths", default="2,2,5,2", help="blocks per encoder stage")
    p.add_argument("--d-fpn", type=int, default=256, help="fused feature width")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qmaxseg",
        description="Scribble-supervised segmentation: synthesize data, train, "
                    "evaluate, and report model complexity.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="square image size")
    p.add_argument("--classes", type=int, default=4, help="classes incl. background (>= 2)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (QMX_SEED overrides)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and emit reports/plots")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0,
                   help="split seed, must match training (QMX_SEED overrides)")
    p.add_argument("--panel", type=int, default=4,
                   help="rows in the qualitative panel figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="parameter/MAC/latency summary")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--base-channels", type=int, default=96)
    p.add_argument("--depths", default="2,2,5,2")
    p.add_argument("--trials", type=int, default=100, help="timed forward passes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional JSON output path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="train the 8-way component toggle grid")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
