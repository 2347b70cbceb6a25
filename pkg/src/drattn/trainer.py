"""Two-phase (frozen backbone, then full fine-tuning) training with Adam,
a plateau learning-rate schedule, evaluation, and the ablation runner.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import backbone as bb
from .attention import ConfigError
from .datapipe import Manifest, load_split_arrays
from .metrics import MetricsReport, confusion_from_predictions, metrics_report
from .seeding import derive_rng, derive_seed
from .tensor_core import AdamState, Tape, Tensor, adam_step, ops

log = logging.getLogger(__name__)

METHOD_LABELS = {
    "baseline": "Baseline",
    "gab_only": "+ GAB only",
    "cab_only": "+ CAB only",
    "gab_cab": "+ GAB + CAB",
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr_phase1: float = 5e-3
    lr_phase2: float = 8e-5
    phase1_epochs: int = 10
    plateau_patience: int = 3
    plateau_factor: float = 0.8
    k: int = 5
    seed: int = 0
    # model shape
    widths: tuple = (16, 32, 64, 128)
    downsample: tuple = (2, 2, 2, 2)
    reduce_channels: int = 128
    reduction_ratio: int = 8
    num_classes: int = 5
    dropout_rate: float = 0.5
    cab_sigmoid: bool = False
    aux_score_loss_weight: float = 0.0
    mode: str = "gab_cab"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "downsample", tuple(int(d) for d in self.downsample))
        if self.epochs < 0 or self.phase1_epochs < 0:
            raise ConfigError("epochs and phase1_epochs must be non-negative")
        if self.batch_size < 1 or self.plateau_patience < 1 or self.k < 1:
            raise ConfigError("batch_size, plateau_patience and k must be positive")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.aux_score_loss_weight < 0:
            raise ConfigError("aux_score_loss_weight must be non-negative")
        if self.mode not in bb.ABLATION_MODES:
            raise ConfigError(f"mode must be one of {bb.ABLATION_MODES}, got {self.mode!r}")

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["downsample"] = list(self.downsample)
        return d

    def model_config(self) -> bb.ModelConfig:
        return bb.ModelConfig(
            widths=self.widths, downsample=self.downsample, reduce_channels=self.reduce_channels,
            reduction_ratio=self.reduction_ratio, k=self.k, num_classes=self.num_classes,
            dropout_rate=self.dropout_rate, cab_sigmoid=self.cab_sigmoid, mode=self.mode,
            seed=self.seed,
        )


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    lr: float


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves when its loss is strictly below the reference: the best
    loss seen so far, seeded with ``reference`` (the loss before the first
    epoch). Without a reference the first observed loss seeds it and that
    epoch counts as not improving. The counter resets on improvement and on
    every reduction.
    """

    def __init__(self, lr: float, patience: int = 3, factor: float = 0.8, reference: Optional[float] = None):
        if not 0.0 < factor < 1.0:
            raise ValueError(f"factor must lie in (0, 1), got {factor}")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = reference
        self.wait = 0

    def step(self, loss: float) -> float:
        if self.best is not None and loss < self.best:
            self.best = loss
            self.wait = 0
        else:
            if self.best is None:
                self.best = loss
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


def plateau_schedule(history, lr: float, patience: int = 3, factor: float = 0.8,
                     reference: Optional[float] = None) -> float:
    """Learning rate after replaying ``history`` of validation losses from ``lr``."""
    sched = PlateauSchedule(lr, patience, factor, reference)
    for loss in history:
        sched.step(loss)
    return sched.lr


def lr_trace(history, lr: float, patience: int = 3, factor: float = 0.8,
             reference: Optional[float] = None) -> list:
    sched = PlateauSchedule(lr, patience, factor, reference)
    return [sched.step(loss) for loss in history]


# --- inference -----------------------------------------------------------

def infer(assembly: bb.ModelAssembly, images: np.ndarray, labels=None, batch_size: int = 16):
    """Inference-mode logits for a batch of images, plus mean loss when labels are given."""
    logits = []
    for start in range(0, len(images), batch_size):
        logits.append(bb.model_forward(images[start:start + batch_size], assembly, training=False).logits.data)
    logits = np.concatenate(logits) if logits else np.zeros((0, assembly.config.num_classes))
    loss = None
    if labels is not None and len(labels):
        loss = float(ops.softmax_cross_entropy(Tensor(logits), labels).data)
    return logits, loss


def evaluate_arrays(assembly, images, labels, batch_size: int = 16) -> tuple[MetricsReport, Optional[float]]:
    logits, loss = infer(assembly, images, labels, batch_size)
    cm = confusion_from_predictions(labels, bb.predict(logits), assembly.config.num_classes)
    return metrics_report(cm), loss


def evaluate(assembly: bb.ModelAssembly, manifest: Manifest, split: Optional[str] = "test",
             batch_size: int = 16) -> MetricsReport:
    images, labels = load_split_arrays(manifest, split)
    if not len(labels):
        raise ConfigError(f"split {split!r} is empty")
    return evaluate_arrays(assembly, images, labels, batch_size)[0]


# --- training ------------------------------------------------------------

@dataclass
class TrainResult:
    assembly: bb.ModelAssembly
    logs: list
    best_checkpoint: bytes
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    initial_val_loss: float = float("nan")


def _loss(result: bb.ForwardResult, labels, aux_weight: float) -> Tensor:
    loss = ops.softmax_cross_entropy(result.logits, labels)
    if aux_weight > 0 and result.artifacts is not None:
        aux = ops.softmax_cross_entropy(result.artifacts.scores, labels)
        loss = ops.add(loss, ops.scale(aux, aux_weight))
    return loss


def train_step(assembly: bb.ModelAssembly, images, labels, state: AdamState, lr: float,
               dropout_seed=None, aux_weight: float = 0.0) -> tuple[float, np.ndarray]:
    """One Adam step on one batch; returns (loss, training-mode logits)."""
    params = assembly.parameters()
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        result = bb.model_forward(images, assembly, training=True, seed=dropout_seed)
        loss = _loss(result, labels, aux_weight)
    tape.backward(loss)
    adam_step(params, [p.grad for p in params], state, lr)
    return float(loss.data), result.logits.data


def train_arrays(assembly: bb.ModelAssembly, train_data: tuple, val_data: tuple,
                 config: TrainConfig) -> TrainResult:
    x_tr, y_tr = train_data
    x_va, y_va = val_data
    if not len(y_tr) or not len(y_va):
        raise ConfigError("training needs non-empty train and val splits")
    if config.epochs == 0:
        return TrainResult(assembly, [], bb.to_checkpoint_bytes(assembly))

    _, initial_val = infer(assembly, x_va, y_va, config.batch_size)
    sched = None
    state = None
    logs = []
    best_blob, best_epoch, best_val = bb.to_checkpoint_bytes(assembly), 0, float("inf")
    for epoch in range(config.epochs):
        if epoch == 0 and config.phase1_epochs > 0:
            assembly.set_frozen("backbone", True)
            state = AdamState()
            sched = PlateauSchedule(config.lr_phase1, config.plateau_patience, config.plateau_factor, initial_val)
        if epoch == config.phase1_epochs:
            assembly.set_frozen("backbone", False)
            state = AdamState()
            best_so_far = sched.best if sched is not None else initial_val
            sched = PlateauSchedule(config.lr_phase2, config.plateau_patience, config.plateau_factor, best_so_far)
        lr = sched.lr
        order = derive_rng(config.seed, "shuffle", epoch).permutation(len(y_tr))
        loss_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, logits = train_step(assembly, x_tr[idx], y_tr[idx], state, lr,
                                      derive_seed(config.seed, "dropout", epoch, b),
                                      config.aux_score_loss_weight)
            loss_sum += loss * len(idx)
            correct += int((bb.predict(logits) == y_tr[idx]).sum())
        val_logits, val_loss = infer(assembly, x_va, y_va, config.batch_size)
        val_acc = float((bb.predict(val_logits) == y_va).mean())
        entry = EpochLog(epoch + 1, loss_sum / len(y_tr), correct / len(y_tr), val_loss, val_acc, lr)
        logs.append(entry)
        log.info("epoch %d lr=%.3g train_loss=%.4f train_acc=%.3f val_loss=%.4f val_acc=%.3f",
                 entry.epoch, lr, entry.train_loss, entry.train_accuracy, val_loss, val_acc)
        if val_loss < best_val:
            best_blob, best_epoch, best_val = bb.to_checkpoint_bytes(assembly), epoch + 1, val_loss
        sched.step(val_loss)
    assembly.set_frozen("backbone", False)
    return TrainResult(assembly, logs, best_blob, best_epoch, best_val, initial_val)


def train(assembly: bb.ModelAssembly, manifest: Manifest, config: TrainConfig,
          out_dir=None) -> TrainResult:
    """Train on the manifest's train split, tracking the minimum-val-loss checkpoint.

    With ``out_dir`` set, writes ``epochs.csv``, ``best.ckpt``, ``final.ckpt``
    and ``model.json``.
    """
    train_data = load_split_arrays(manifest, "train")
    val_data = load_split_arrays(manifest, "val")
    result = train_arrays(assembly, train_data, val_data, config)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def write_run(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_epoch_log(result.logs, out / "epochs.csv")
    (out / "best.ckpt").write_bytes(result.best_checkpoint)
    bb.save_assembly(out / "final.ckpt", result.assembly)
    (out / "model.json").write_text(result.assembly.config.dumps(), encoding="utf-8")


def write_epoch_log(logs, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([fl.name for fl in fields(EpochLog)])
        for e in logs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.train_accuracy),
                        repr(e.val_loss), repr(e.val_accuracy), repr(e.lr)])


# --- ablation ------------------------------------------------------------

@dataclass
class AblationResult:
    rows: list
    reports: dict
    parameter_counts: dict
    manifest_hash: str
    split_hashes: dict = field(default_factory=dict)

    def table(self) -> str:
        lines = ["| Method | Accuracy (%) | F1 Score (%) | # Parameters |", "|---|---|---|---|"]
        for r in self.rows:
            lines.append(f"| {r['method']} | {100 * r['accuracy']:.1f} | {100 * r['f1']:.1f} | {r['parameters']} |")
        return "\n".join(lines) + "\n"


def manifest_digest(manifest: Manifest) -> str:
    h = hashlib.sha256()
    for s in manifest.samples:
        h.update(f"{s.path}\t{s.grade}\t{s.split}\t{s.aug_tag}\n".encode("utf-8"))
    return h.hexdigest()


def run_ablation(config: TrainConfig, manifest: Manifest, modes=bb.ABLATION_MODES,
                 eval_split: str = "test", data: Optional[dict] = None) -> AblationResult:
    """Train and evaluate each attention variant under identical seed and splits."""
    if data is None:
        data = {s: load_split_arrays(manifest, s) for s in ("train", "val", eval_split)}
    rows, reports, counts, hashes = [], {}, {}, {}
    for mode in modes:
        cfg = TrainConfig(**{**config.to_dict(), "mode": mode})
        assembly = bb.build_assembly(cfg.model_config())
        counts[mode] = assembly.parameter_count()
        hashes[mode] = manifest_digest(manifest)
        result = train_arrays(assembly, data["train"], data["val"], cfg)
        best = bb.from_checkpoint_bytes(result.best_checkpoint)
        report, _ = evaluate_arrays(best, *data[eval_split], batch_size=cfg.batch_size)
        reports[mode] = report
        rows.append({"method": METHOD_LABELS[mode], "mode": mode, "accuracy": report.accuracy,
                     "f1": report.f1_macro, "parameters": counts[mode]})
    return AblationResult(rows, reports, counts, manifest_digest(manifest), hashes)
