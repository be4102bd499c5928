"""Training loops, metrics, confidence stratification, ablation suite.

One seed fully determines a run: parameter init, batch order and dropout
masks all derive from independent child streams of the config seed, so a
repeated (config, seed) pair reproduces loss curves and reports
bit-identically.

The longitudinal task trains the temporal head on top of the backbone;
the backbone stays frozen unless ``finetune`` is set. Its
"single_timepoint" ablation feeds only the most recent scan through the
same machinery (a length-1 sequence pools trivially to M_T).
"""

from __future__ import annotations

import csv
import io
import json
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import DatasetBundle, SplitArrays
from .encoder import ABLATION_MODES, DSViTModel, EncoderConfig
from .errors import InvalidInputError, TrainingDivergenceError
from .rtab import RTABHead, forward_sequence
from .tensor import Tensor

TASKS = ("single_timepoint", "longitudinal")
LONGITUDINAL_ARMS = ("rtab", "single_timepoint")
CONVERGENCE_WINDOW = 0.005  # "within half a point" of the final best val accuracy


@dataclass(frozen=True)
class TrainConfig:
    task: str = "single_timepoint"
    epochs: int = 25
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    patience: int = 10
    ablation: str = "dual_stream"
    finetune: bool = False
    confidence_threshold: float = 0.7
    model: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidInputError(f"unknown task {self.task!r}")
        if self.task == "single_timepoint" and self.ablation not in ABLATION_MODES:
            raise InvalidInputError(f"unknown ablation {self.ablation!r}")
        if self.task == "longitudinal" and self.ablation not in LONGITUDINAL_ARMS:
            raise InvalidInputError(
                f"longitudinal ablation must be one of {LONGITUDINAL_ARMS}"
            )
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be positive")
        if not 0.5 <= self.confidence_threshold < 1.0:
            raise InvalidInputError("confidence threshold must be in [0.5, 1)")

    @property
    def effective_model(self) -> EncoderConfig:
        if self.task == "single_timepoint":
            return self.model.with_ablation(self.ablation)
        return self.model

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__ if f != "model"}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown train config fields: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = EncoderConfig.from_dict(d["model"])
        return cls(**d)


# -- metrics -------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    recall: float  # sensitivity on the positive (diseased / at-risk) class
    n: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "recall": self.recall, "n": self.n}


@dataclass
class ConfidenceBuckets:
    threshold: float
    coverage: float  # fraction of predictions with confidence >= threshold
    accuracy: float | None  # None when the bucket is empty
    n_high: int

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "coverage": self.coverage,
            "accuracy": self.accuracy,
            "n_high": self.n_high,
        }


def compute_metrics(pred: np.ndarray, conf: np.ndarray, labels: np.ndarray,
                    threshold: float) -> tuple[Metrics, ConfidenceBuckets]:
    if pred.size == 0:
        raise InvalidInputError("cannot score an empty prediction set")
    correct = pred == labels
    accuracy = float(correct.mean())
    positives = labels == 1
    recall = float(correct[positives].mean()) if positives.any() else 0.0
    high = conf >= threshold
    bucket = ConfidenceBuckets(
        threshold=threshold,
        coverage=float(high.mean()),
        accuracy=float(correct[high].mean()) if high.any() else None,
        n_high=int(high.sum()),
    )
    return Metrics(accuracy=accuracy, recall=recall, n=int(pred.size)), bucket


# -- optimizer -----------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer with bias correction, float32 state."""

    def __init__(self, params: "OrderedDict[str, Tensor]", lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- forward helpers -----------------------------------------------------------


def _arm_scan_batches(arrays: SplitArrays, rows: np.ndarray, cfg: TrainConfig):
    """Scan batches for the active arm; the single-timepoint arm of the
    longitudinal task sees only the most recent scan."""
    if cfg.task == "single_timepoint":
        return [arrays.scan_batch(rows, 0)]
    if cfg.ablation == "single_timepoint":
        return [arrays.scan_batch(rows, arrays.n_scans - 1)]
    return arrays.scan_batches(rows)


def _forward_logits(model: DSViTModel, head: RTABHead | None, batches, *,
                    training: bool, rng) -> Tensor:
    if head is None:
        logits, _ = model.forward(batches[0], training=training, rng=rng)
        return logits
    logits, _ = forward_sequence(model, head, batches, training=training, rng=rng)
    return logits


def predict_split(model: DSViTModel, head: RTABHead | None, arrays: SplitArrays,
                  cfg: TrainConfig, batch_size: int | None = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """(predicted class, confidence) over a whole split, batched, no graph."""
    bs = batch_size or cfg.batch_size
    preds, confs = [], []
    with T.no_grad():
        for start in range(0, arrays.n, bs):
            rows = np.arange(start, min(start + bs, arrays.n))
            logits = _forward_logits(
                model, head, _arm_scan_batches(arrays, rows, cfg),
                training=False, rng=None,
            )
            probs = T.softmax(logits, axis=-1).data
            preds.append(probs.argmax(axis=-1))
            confs.append(probs.max(axis=-1))
    return np.concatenate(preds), np.concatenate(confs)


def evaluate_split(model: DSViTModel, head: RTABHead | None, arrays: SplitArrays,
                   cfg: TrainConfig) -> tuple[Metrics, ConfidenceBuckets]:
    pred, conf = predict_split(model, head, arrays, cfg)
    return compute_metrics(pred, conf, arrays.labels, cfg.confidence_threshold)


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DSViTModel
    head: RTABHead | None
    loss_curve: list[float]
    val_accuracy_curve: list[float]
    best_epoch: int  # 1-based
    epochs_to_converge: int  # 1-based
    epochs_run: int


def epochs_to_converge(val_curve: list[float], window: float = CONVERGENCE_WINDOW) -> int:
    """First epoch (1-based) whose val accuracy is within ``window`` of the
    final best."""
    best = max(val_curve)
    for i, acc in enumerate(val_curve):
        if acc >= best - window:
            return i + 1
    return len(val_curve)


def _snapshot(params: "OrderedDict[str, Tensor]") -> dict:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: "OrderedDict[str, Tensor]", snap: dict) -> None:
    for k, p in params.items():
        p.data = snap[k].copy()
        p.grad = None


def train(bundle: DatasetBundle, cfg: TrainConfig) -> TrainResult:
    """Train one arm to best-validation accuracy and return it restored."""
    if cfg.task == "longitudinal" and not bundle.longitudinal:
        raise InvalidInputError("longitudinal task needs a longitudinal dataset")
    if cfg.task == "single_timepoint" and bundle.longitudinal:
        raise InvalidInputError("single-timepoint task needs a single-scan dataset")
    model_cfg = cfg.effective_model
    if not model_cfg.dual_stream_embedding:
        if bundle.split("train").pixels is None:
            raise InvalidInputError(
                "collapsed-embedding arm needs the dataset loaded with pixels"
            )

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    model = DSViTModel(model_cfg, init_rng)
    head = None
    trainable: "OrderedDict[str, Tensor]" = OrderedDict()
    if cfg.task == "longitudinal":
        head = RTABHead(model_cfg.dim, model_cfg.n_classes, init_rng)
        if cfg.finetune:
            trainable.update(model.named_parameters())
        else:
            for p in model.named_parameters().values():
                p.requires_grad = False
        trainable.update(head.named_parameters())
    else:
        trainable.update(model.named_parameters())

    optim = Adam(trainable, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                 eps=cfg.adam_eps)
    train_arrays = bundle.split("train")
    val_arrays = bundle.split("val")

    loss_curve: list[float] = []
    val_curve: list[float] = []
    best_val = -1.0
    best_epoch = 0
    best_snap = _snapshot(trainable)
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(train_arrays.n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, train_arrays.n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            batches = _arm_scan_batches(train_arrays, rows, cfg)
            try:
                logits = _forward_logits(model, head, batches, training=True,
                                         rng=dropout_rng)
                loss = T.cross_entropy(logits, train_arrays.labels[rows])
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDivergenceError("loss is not finite")
                loss.backward()
            except TrainingDivergenceError:
                raise
            except Exception as e:
                if isinstance(e, (ArithmeticError, FloatingPointError)):
                    raise TrainingDivergenceError(
                        f"training diverged at epoch {epoch}, batch {n_batches}: {e}"
                    ) from e
                raise
            optim.step()
            optim.zero_grad()
            epoch_loss += value
            n_batches += 1
        loss_curve.append(epoch_loss / n_batches)

        val_metrics, _ = evaluate_split(model, head, val_arrays, cfg)
        val_curve.append(val_metrics.accuracy)
        if val_metrics.accuracy > best_val:
            best_val = val_metrics.accuracy
            best_epoch = epoch
            best_snap = _snapshot(trainable)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    _restore(trainable, best_snap)
    return TrainResult(
        model=model,
        head=head,
        loss_curve=loss_curve,
        val_accuracy_curve=val_curve,
        best_epoch=best_epoch,
        epochs_to_converge=epochs_to_converge(val_curve),
        epochs_run=len(val_curve),
    )


# -- reporting -----------------------------------------------------------------


@dataclass
class ArmReport:
    arm: str
    task: str
    seed: int
    epochs_run: int
    best_epoch: int
    epochs_to_converge: int
    loss_curve: list[float]
    val_accuracy_curve: list[float]
    metrics: dict  # split -> Metrics
    buckets: dict  # split -> ConfidenceBuckets

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "task": self.task,
            "seed": self.seed,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "epochs_to_converge": self.epochs_to_converge,
            "loss_curve": self.loss_curve,
            "val_accuracy_curve": self.val_accuracy_curve,
            "metrics": {s: m.to_dict() for s, m in self.metrics.items()},
            "buckets": {s: b.to_dict() for s, b in self.buckets.items()},
        }


@dataclass
class ExperimentReport:
    config: dict
    dataset_digest: str
    split_counts: dict
    arms: list[ArmReport]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "dataset_digest": self.dataset_digest,
            "split_counts": self.split_counts,
            "arms": [a.to_dict() for a in self.arms],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    CSV_FIELDS = ("arm", "split", "accuracy", "recall", "hc_accuracy",
                  "hc_coverage", "epochs_to_converge")

    def csv_rows(self) -> list[dict]:
        rows = []
        for arm in self.arms:
            for split in sorted(arm.metrics):
                m = arm.metrics[split]
                b = arm.buckets[split]
                rows.append({
                    "arm": arm.arm,
                    "split": split,
                    "accuracy": m.accuracy,
                    "recall": m.recall,
                    "hc_accuracy": "" if b.accuracy is None else b.accuracy,
                    "hc_coverage": b.coverage,
                    "epochs_to_converge": arm.epochs_to_converge,
                })
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.csv_rows())
        return buf.getvalue()

    def arm(self, name: str) -> ArmReport:
        for a in self.arms:
            if a.arm == name:
                return a
        raise KeyError(name)


def run_arm(bundle: DatasetBundle, cfg: TrainConfig) -> tuple[TrainResult, ArmReport]:
    result = train(bundle, cfg)
    metrics: dict = {}
    buckets: dict = {}
    for split_name in sorted(bundle.splits):
        m, b = evaluate_split(result.model, result.head, bundle.split(split_name), cfg)
        metrics[split_name] = m
        buckets[split_name] = b
    report = ArmReport(
        arm=cfg.ablation,
        task=cfg.task,
        seed=cfg.seed,
        epochs_run=result.epochs_run,
        best_epoch=result.best_epoch,
        epochs_to_converge=result.epochs_to_converge,
        loss_curve=[float(v) for v in result.loss_curve],
        val_accuracy_curve=[float(v) for v in result.val_accuracy_curve],
        metrics=metrics,
        buckets=buckets,
    )
    return result, report


def _split_counts(bundle: DatasetBundle) -> dict:
    return {
        name: {"n": arrays.n, "n_positive": int(arrays.labels.sum())}
        for name, arrays in sorted(bundle.splits.items())
    }


def ablation_suite(bundle: DatasetBundle, cfg: TrainConfig, arms=None
                   ) -> tuple[dict, ExperimentReport]:
    """Run every arm on the shared dataset with the shared seed.

    Returns (results by arm, comparative report). Arms default to the four
    embedding/stream modes for the single-timepoint task and to the
    temporal-vs-last-scan pair for the longitudinal task.
    """
    if arms is None:
        arms = ABLATION_MODES if cfg.task == "single_timepoint" else LONGITUDINAL_ARMS
    results = {}
    reports = []
    for arm in arms:
        arm_cfg = replace(cfg, ablation=arm)
        result, report = run_arm(bundle, arm_cfg)
        results[arm] = result
        reports.append(report)
    report = ExperimentReport(
        config=cfg.to_dict(),
        dataset_digest=bundle.digest,
        split_counts=_split_counts(bundle),
        arms=reports,
    )
    return results, report
