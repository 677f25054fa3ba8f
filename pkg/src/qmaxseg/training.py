"""Training loop: AdamW with a cosine-annealed learning rate, the three-part
scribble loss, per-epoch validation, best-checkpoint retention and
deterministic seeding.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import checkpoint as ckpt
from .backbone import BackboneConfig
from .data import ImageSample, augment, sample_rng
from .errors import ConfigError, NumericError
from .losses import LossWeights, esl_loss, partial_ce, psl_loss, ssl_loss, total_loss
from .metrics import MetricReport, aggregate, compute_report
from .model import ModelConfig, QMaxSeg


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 200
    batch_size: int = 8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    dual_decoder: bool = True
    query: bool = True
    edge: bool = True
    seed: int = 0
    image_size: int = 256
    num_classes: int = 4
    base_channels: int = 96
    depths: tuple[int, ...] = (2, 2, 5, 2)
    d_fpn: int = 256
    refine_layers: int = 2
    grad_clip: float | None = None
    dice_include_background: bool = True
    eta_min: float = 0.0
    augment: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.num_classes,
            backbone=BackboneConfig(
                base_channels=self.base_channels,
                depths=tuple(self.depths),
                input_size=self.image_size,
            ),
            d_fpn=self.d_fpn,
            refine_layers=self.refine_layers,
            use_dual_decoder=self.dual_decoder,
            use_query=self.query,
            use_edge=self.edge,
        )

    @property
    def toggles(self) -> dict[str, bool]:
        return {"dual_decoder": self.dual_decoder, "query": self.query,
                "edge": self.edge}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["depths"] = tuple(d["depths"])
        d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_ssl: float
    loss_psl: float
    loss_esl: float
    val_dsc: float
    val_hd95: float
    lr: float


HISTORY_FIELDS = ["epoch", "loss_total", "loss_ssl", "loss_psl", "loss_esl",
                  "val_dsc", "val_hd95", "lr"]


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_FIELDS)
        for rec in history:
            writer.writerow([getattr(rec, f) for f in HISTORY_FIELDS])


def read_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(epoch=int(r["epoch"]),
                        **{f: float(r[f]) for f in HISTORY_FIELDS[1:]})
            for r in rows]


def lr_at(step, total_steps, cfg: TrainConfig) -> float:
    """Cosine annealing from cfg.lr down to cfg.eta_min across total_steps."""
    if step < 0 or step > total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    span = cfg.lr - cfg.eta_min
    return cfg.eta_min + 0.5 * span * (1.0 + math.cos(math.pi * step / total_steps))


def batch_tensors(samples, device="cpu"):
    """Stack samples into (image, labels, edge_gt) tensors."""
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(device)
    labels = torch.from_numpy(
        np.stack([s.scribble.labels for s in samples])).long().to(device)
    edges = torch.from_numpy(np.stack([s.edge_gt for s in samples])).to(device)
    return images, labels, edges


def compute_losses(model: QMaxSeg, images, labels, edges, alpha,
                   cfg: TrainConfig):
    """Forward pass plus the active loss components; inactive components are
    exact zeros."""
    out = model(images)
    unknown = cfg.num_classes
    zero = out.y1.sum() * 0.0

    if out.y2 is not None:
        ssl = ssl_loss(labels, out.y1, out.y2, unknown)
        psl = psl_loss(out.y1.softmax(dim=1), out.y2.softmax(dim=1), alpha,
                       include_background=cfg.dice_include_background)
    else:
        ssl = partial_ce(out.y1, labels, unknown)
        psl = zero

    if out.edge_pred is not None:
        target = torch.nn.functional.adaptive_avg_pool2d(
            edges, out.edge_pred.shape[-2:])
        esl = esl_loss(out.edge_pred, target)
    else:
        esl = zero

    total = total_loss(ssl, psl, esl, cfg.loss_weights)
    return out, {"total": total, "ssl": ssl, "psl": psl, "esl": esl}


def train_step(model, optimizer, images, labels, edges, alpha, cfg):
    """One optimizer update; returns the detached loss components."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    _, parts = compute_losses(model, images, labels, edges, alpha, cfg)
    values = {k: float(v.detach()) for k, v in parts.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericError(f"non-finite loss components: {values}")
    parts["total"].backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return values


@dataclass
class FitResult:
    model: QMaxSeg
    best_state: dict
    best_epoch: int
    best_val_dsc: float
    history: list[EpochRecord]


def _clone_state(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def fit(cfg: TrainConfig, train_samples, val_samples, device="cpu",
        log_fn=None) -> FitResult:
    """Train for cfg.epochs, validating each epoch and retaining the state
    with the best mean foreground DSC."""
    if not train_samples:
        raise ConfigError("empty training split")
    torch.manual_seed(cfg.seed)
    model = QMaxSeg(cfg.model_config()).to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                  weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng((cfg.seed, 0xC0FFEE))
    alpha_rng = np.random.default_rng((cfg.seed, 0xA1FA))

    history: list[EpochRecord] = []
    best_state = _clone_state(model)
    best_epoch = -1
    best_dsc = -float("inf")

    for epoch in range(cfg.epochs):
        lr_now = lr_at(epoch, cfg.epochs, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr_now

        order = shuffle_rng.permutation(len(train_samples))
        sums = {"total": 0.0, "ssl": 0.0, "psl": 0.0, "esl": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [train_samples[i] for i in idx]
            if cfg.augment:
                batch = [augment(s, sample_rng(cfg.seed, epoch, s.id)) for s in batch]
            images, labels, edges = batch_tensors(batch, device)
            alpha = draw_alpha(alpha_rng)
            values = train_step(model, optimizer, images, labels, edges, alpha, cfg)
            for k in sums:
                sums[k] += values[k]
            n_batches += 1

        report = evaluate_model(model, val_samples, cfg.num_classes,
                                device=device) if val_samples else None
        val_dsc = report.dsc_avg if report else float("nan")
        val_hd95 = report.hd95_avg if report else float("nan")
        record = EpochRecord(
            epoch=epoch,
            loss_total=sums["total"] / n_batches,
            loss_ssl=sums["ssl"] / n_batches,
            loss_psl=sums["psl"] / n_batches,
            loss_esl=sums["esl"] / n_batches,
            val_dsc=val_dsc,
            val_hd95=val_hd95,
            lr=lr_now,
        )
        history.append(record)
        if log_fn:
            log_fn(record)
        if report and val_dsc > best_dsc:
            best_dsc = val_dsc
            best_epoch = epoch
            best_state = _clone_state(model)

    if best_epoch < 0:  # no validation split: keep the final state
        best_state = _clone_state(model)
        best_epoch = cfg.epochs - 1
        best_dsc = float("nan")
    return FitResult(model, best_state, best_epoch, best_dsc, history)


def draw_alpha(rng) -> float:
    """Mixing weight drawn once per iteration, strictly inside (0, 1)."""
    while True:
        a = float(rng.uniform())
        if 0.0 < a < 1.0:
            return a


def evaluate_model(model: QMaxSeg, samples, num_classes, device="cpu",
                   batch_size=8) -> MetricReport:
    """Mean per-class metrics of the main head's argmax over samples with
    dense labels."""
    was_training = model.training
    model.eval()
    reports = []
    with torch.no_grad():
        scored = [s for s in samples if s.dense_gt is not None]
        for start in range(0, len(scored), batch_size):
            chunk = scored[start:start + batch_size]
            images, _, _ = batch_tensors(chunk, device)
            preds = model(images).y1.argmax(dim=1).cpu().numpy()
            for s, pred in zip(chunk, preds):
                reports.append(compute_report(pred, s.dense_gt, num_classes,
                                              s.spacing))
    if was_training:
        model.train()
    if not reports:
        raise ConfigError("no samples with dense labels to evaluate")
    return aggregate(reports)


def save_fit_checkpoint(path, result: FitResult, cfg: TrainConfig):
    """Persist the best state with the config snapshot and RNG state."""
    meta = {
        "kind": "qmaxseg-checkpoint",
        "train_config": cfg.to_dict(),
        "best_epoch": result.best_epoch,
        "best_val_dsc": result.best_val_dsc,
    }
    return ckpt.save_checkpoint(path, result.best_state, meta=meta,
                                rng_state=torch.get_rng_state())


def load_fit_checkpoint(path, device="cpu"):
    """Rebuild the model (from the embedded config) and load its weights."""
    arrays, meta, _ = ckpt.load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["train_config"])
    model = QMaxSeg(cfg.model_config()).to(device)
    ckpt.apply_arrays(model, arrays)
    model.eval()
    return model, cfg, meta
