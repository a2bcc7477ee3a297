"""Training loop, Adam, step-decay schedule, evaluation and McNemar's test."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dsp import AugmentConfig, MelSpectrogram, SpectroConfig, Waveform, augment, mel_filterbank, mel_spectrogram, mixup, pad_or_clip, sample_rng
from .errors import ContractError, DataError
from .model import Model, ModelConfig
from .synthetic import Dataset
from .tensor import Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Schedule and optimizer


@dataclass(frozen=True)
class Schedule:
    initial_lr: float = 1e-4
    factor: float = 0.5
    period: int = 10

    def __post_init__(self):
        if not 0 < self.factor <= 1:
            raise ValueError("decay factor must lie in (0, 1]")
        if self.period < 1:
            raise ValueError("decay period must be >= 1 epoch")


def lr_at_epoch(s: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return s.initial_lr * s.factor ** (epoch // s.period)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def create(cls, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update using each parameter's ``.grad``, in place."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.items():
        g = p.grad
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Configuration and metrics


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    schedule: Schedule = field(default_factory=Schedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    clip_seconds: float | None = None
    eval_batch_size: int = 64
    stop_at_val_accuracy: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs and batch sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("schedule"), dict):
            d["schedule"] = Schedule(**d["schedule"])
        if isinstance(d.get("augment"), dict):
            aug = dict(d["augment"])
            for key in ("noise_snr_db", "speed_factors"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            d["augment"] = AugmentConfig(**aug)
        return cls(**d)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float
    seconds: float


CSV_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_acc", "seconds")


@dataclass
class RunMetrics:
    seed: int
    epochs: list[EpochMetrics] = field(default_factory=list)

    def best(self) -> EpochMetrics:
        # first epoch wins ties
        return max(self.epochs, key=lambda e: (e.val_acc, -e.epoch))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.lr), repr(e.train_loss), repr(e.train_acc), repr(e.val_acc), f"{e.seconds:.3f}"])


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# Features


class Featurizer:
    """Waveform -> normalized mel spectrogram with a cached filterbank."""

    def __init__(self, cfg: SpectroConfig, clip_seconds: float | None = None):
        self.cfg = cfg
        self.clip_seconds = clip_seconds
        self.bank = mel_filterbank(cfg)

    def wave(self, samples: np.ndarray, sample_rate: int) -> Waveform:
        w = Waveform(samples, sample_rate)
        return pad_or_clip(w, self.clip_seconds) if self.clip_seconds else w

    def __call__(self, w: Waveform) -> np.ndarray:
        return mel_spectrogram(w, self.cfg, self.bank).values

    def batch(self, data: Dataset) -> np.ndarray:
        return np.stack([self(self.wave(x, data.sample_rate)) for x in data.waveforms])


def _check_split(data: Dataset, num_classes: int, name: str) -> None:
    if len(data) == 0:
        raise DataError(f"{name} split is empty")
    if data.labels.min() < 0 or data.labels.max() >= num_classes:
        raise DataError(f"{name} split has labels outside [0, {num_classes})")


def _fingerprints(data: Dataset) -> set[str]:
    return {hashlib.sha1(np.ascontiguousarray(x).tobytes()).hexdigest() for x in data.waveforms}


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    correct: np.ndarray
    predictions: np.ndarray


def evaluate(model: Model, specs: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> EvalResult:
    labels = np.asarray(labels)
    preds = model.predict(specs, batch_size)
    correct = preds == labels
    return EvalResult(float(correct.mean()), correct, preds)


def accuracy_from_predictions(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    return float((predictions == labels).mean())


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: Model
    metrics: RunMetrics
    best_epoch: int
    best_val_acc: float
    checkpoint: Path | None = None


def _train_batch(featurize: Featurizer, data: Dataset, idx: np.ndarray, epoch: int, batch_no: int, cfg: TrainConfig, num_classes: int):
    aug = cfg.augment
    specs = []
    for i in idx:
        rng = sample_rng(cfg.seed, epoch, int(i))
        w = augment(featurize.wave(data.waveforms[i], data.sample_rate), aug, rng)
        spec = MelSpectrogram(featurize(w))
        specs.append(augment(spec, aug, rng).values)
    x = np.stack(specs)
    y = np.eye(num_classes)[data.labels[idx]]
    rng = sample_rng(cfg.seed, epoch, 1 << 30, batch_no)
    if len(idx) > 1 and rng.random() < aug.p_mixup:
        lam = float(rng.beta(aug.mixup_alpha, aug.mixup_alpha))
        perm = rng.permutation(len(idx))
        x, y = mixup(x, y, x[perm], y[perm], lam)
    return x, y


def train(
    model_cfg: ModelConfig,
    train_set: Dataset,
    val_set: Dataset,
    spectro_cfg: SpectroConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    manifest: dict | None = None,
) -> TrainResult:
    """Mini-batch Adam training with per-epoch validation.

    Keeps the parameters of the best validation epoch (earliest on ties) and,
    when ``out_dir`` is given, writes ``metrics.csv``, ``best.spck`` and a
    ``manifest.json`` (full configuration, seed, data description, plus any
    caller-supplied ``manifest`` entries) there.
    """
    for name, split in (("train", train_set), ("validation", val_set)):
        _check_split(split, model_cfg.num_classes, name)
    if _fingerprints(train_set) & _fingerprints(val_set):
        raise DataError("train and validation splits share clips")

    featurize = Featurizer(spectro_cfg, cfg.clip_seconds)
    val_specs = featurize.batch(val_set)
    if val_specs.shape[1:] != (model_cfg.freq_bins, model_cfg.time_slots):
        raise DataError(f"spectrogram grid {val_specs.shape[1:]} does not match the model input grid")

    model = Model(model_cfg, seed=cfg.seed)
    state = AdamState.create(model.params, cfg.schedule.initial_lr, cfg.beta1, cfg.beta2, cfg.eps)
    metrics = RunMetrics(cfg.seed)
    best_state, best_acc, best_epoch = model.state_dict(), -1.0, -1
    order_rng = np.random.default_rng([cfg.seed, 7])
    n = len(train_set)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        state.lr = lr_at_epoch(cfg.schedule, epoch)
        order = order_rng.permutation(n)
        loss_sum, hits = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x, y = _train_batch(featurize, train_set, idx, epoch, b, cfg, model_cfg.num_classes)
            model.zero_grad()
            logits = model(x)
            loss = T.cross_entropy(logits, y)
            T.backward(loss)
            adam_step(model.params, state)
            loss_sum += loss.item() * len(idx)
            hits += int((logits.data.argmax(axis=1) == y.argmax(axis=1)).sum())
        val = evaluate(model, val_specs, val_set.labels, cfg.eval_batch_size)
        row = EpochMetrics(epoch, state.lr, loss_sum / n, hits / n, val.accuracy, time.perf_counter() - t0)
        metrics.epochs.append(row)
        log.info("epoch %d lr=%.2e loss=%.4f train_acc=%.3f val_acc=%.3f (%.1fs)", *asdict(row).values())
        if val.accuracy > best_acc:
            best_acc, best_epoch, best_state = val.accuracy, epoch, model.state_dict()
        if cfg.stop_at_val_accuracy is not None and val.accuracy >= cfg.stop_at_val_accuracy:
            break

    model.load_state_dict(best_state)
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics.write_csv(out / "metrics.csv")
        ckpt = out / "best.spck"
        model.save(ckpt)
        record = {
            "seed": cfg.seed,
            "model": model_cfg.to_dict(),
            "train": cfg.to_dict(),
            "spectrogram": asdict(spectro_cfg),
            "data": {"train": train_set.description, "validation": val_set.description},
            "best_epoch": best_epoch,
            "best_val_acc": best_acc,
            "epochs_run": len(metrics.epochs),
            **(manifest or {}),
        }
        (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return TrainResult(model, metrics, best_epoch, best_acc, ckpt)


# ---------------------------------------------------------------------------
# McNemar


@dataclass(frozen=True)
class ContingencyTable:
    """Joint correctness counts; ``n01`` = A wrong and B right, ``n10`` = A right and B wrong."""

    n00: int
    n01: int
    n10: int
    n11: int

    @property
    def total(self) -> int:
        return self.n00 + self.n01 + self.n10 + self.n11


@dataclass(frozen=True)
class McNemarResult:
    statistic: float
    p_value: float
    table: ContingencyTable

    def significant(self, alpha: float = 0.01) -> bool:
        return self.p_value < alpha


def mcnemar_from_table(table: ContingencyTable) -> McNemarResult:
    discordant = table.n01 + table.n10
    if discordant == 0:
        return McNemarResult(0.0, 1.0, table)
    stat = (abs(table.n01 - table.n10) - 1) ** 2 / discordant
    # chi-square survival function with one degree of freedom
    return McNemarResult(stat, math.erfc(math.sqrt(stat / 2.0)), table)


def mcnemar(a_correct, b_correct) -> McNemarResult:
    """Continuity-corrected McNemar test on paired correctness vectors."""
    a = np.asarray(a_correct, dtype=bool)
    b = np.asarray(b_correct, dtype=bool)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"correctness vectors must be equal-length 1-D, got {a.shape} and {b.shape}")
    table = ContingencyTable(
        n00=int((~a & ~b).sum()),
        n01=int((~a & b).sum()),
        n10=int((a & ~b).sum()),
        n11=int((a & b).sum()),
    )
    return mcnemar_from_table(table)
