"""Adam training for both stages and accuracy/loss evaluation.

Stage I trains the classifier on source windows with the adapter frozen at
identity. Stage II freezes the classifier and trains only the adapter on a
stratified labelled subset of the target windows.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import model as mdl
from . import tensor as tn
from .dataio import Dataset
from .divergence import HistogramConfig, LossDistribution
from .errors import ConfigError, ContractError, DataError, NumericError
from .model import AdapterParams, ClassifierParams
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_JUMP_LIMIT = 10.0
# jumps ending below this many nats are spikes near zero loss, not divergence
LOSS_JUMP_FLOOR = 0.5


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 200
    dropout_p: float = 0.5
    seed: int = 0
    early_stop_patience: int = 10
    target_label_fraction: float = 0.2
    clip_norm: float = 5.0
    val_fraction: float = 0.1
    # eval-loss improvements smaller than this do not reset patience
    min_delta: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if not 0.0 < self.target_label_fraction <= 1.0:
            raise DataError("target_label_fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("batch_size, max_epochs and early_stop_patience must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")


def stage_two_defaults() -> TrainConfig:
    """Stage-II settings used by the experiment runner and the CLI.

    The labelled target subset is small, so batches are smaller and the step
    larger than in stage I; a longer patience lets slow adapters converge.
    Batches of 8 at this step size let Adam throw an already well-fitted
    adapter off its optimum.
    """
    return TrainConfig(learning_rate=0.005, batch_size=16, max_epochs=150, early_stop_patience=20)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray], cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place."""
    if len(grads) != len(params) or len(params) != len(state.m):
        raise ContractError("gradients must be given for exactly the trainable parameters")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_accuracy: float
    eval_loss: float


@dataclass
class TrainReport:
    stage: str
    epochs: list[EpochRecord] = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = 0
    n_train: int = 0
    n_eval: int = 0
    wall_time: float = 0.0

    def to_jsonl(self) -> str:
        """One JSON object per epoch plus a summary line; wall time is omitted
        so identical runs give identical bytes."""
        lines = [json.dumps(dict(asdict(e), stage=self.stage), sort_keys=True) for e in self.epochs]
        lines.append(json.dumps({
            "stage": self.stage,
            "summary": True,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
        }, sort_keys=True))
        return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ helpers


def stratified_sample(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices holding ``fraction`` of each class (at least one each)."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    picked = []
    for g in np.unique(labels):
        idx = np.flatnonzero(labels == g)
        k = max(1, int(round(fraction * len(idx))))
        picked.append(rng.choice(idx, size=k, replace=False))
    return np.sort(np.concatenate(picked))


def _holdout_split(y: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if fraction == 0.0 or len(y) < 10:
        return np.arange(len(y)), np.arange(0)
    val = stratified_sample(y, fraction, rng)
    train = np.setdiff1d(np.arange(len(y)), val)
    return train, val


def _batch_loss(clf, adapter, X, y, mode, rng, dropout_p) -> Tensor:
    logits = mdl.forward(clf, adapter, X, mode=mode, rng=rng, dropout_p=dropout_p)
    return tn.softmax_cross_entropy(logits, y).mean()


def _score(clf, adapter, X, y) -> tuple[float, float]:
    logits = mdl.predict_logits(clf, adapter, X)
    losses = mdl.window_losses(logits, y)
    return accuracy(logits, y), float(np.mean(losses))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Percent correct; ties resolve to the lowest class index."""
    pred = np.argmax(logits, axis=1)
    return 100.0 * float(np.mean(pred == labels))


def _run_epochs(
    stage: str,
    trainable: list[Tensor],
    clf: ClassifierParams,
    adapter: Optional[AdapterParams],
    X: np.ndarray,
    y: np.ndarray,
    X_eval: np.ndarray,
    y_eval: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    mode: str,
) -> TrainReport:
    start = time.perf_counter()
    report = TrainReport(stage, n_train=len(y), n_eval=len(y_eval))
    state = AdamState.for_params(trainable)
    owner = adapter if stage == "adapt" else clf
    # the starting point competes too, so training that never helps is undone
    _, best_loss = _score(clf, adapter, X_eval, y_eval)
    best = mdl.snapshot(owner)
    stale = 0
    prev_loss = None
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            for p in trainable:
                p.zero_grad()
            tn.current_tape().clear()
            loss = _batch_loss(clf, adapter, X[idx], y[idx], mode, rng, cfg.dropout_p)
            tn.backward(loss)
            grads = [p.grad for p in trainable]
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(state, trainable, grads, cfg)
            total += loss.item() * len(idx)
        train_loss = total / len(y)
        if prev_loss is not None and train_loss > max(LOSS_JUMP_LIMIT * prev_loss, LOSS_JUMP_FLOOR):
            raise NumericError(
                f"{stage} epoch {epoch}: training loss jumped from {prev_loss:.4g} to {train_loss:.4g}"
            )
        prev_loss = train_loss
        acc, eval_loss = _score(clf, adapter, X_eval, y_eval)
        report.epochs.append(EpochRecord(epoch, train_loss, acc, eval_loss))
        log.debug("%s epoch %d: train %.4f eval %.4f acc %.1f", stage, epoch, train_loss, eval_loss, acc)

        if eval_loss < best_loss - cfg.min_delta:
            best_loss = eval_loss
            best = mdl.snapshot(owner)
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    mdl.restore(owner, best)
    report.epochs_run = len(report.epochs)
    report.wall_time = time.perf_counter() - start
    return report


def _is_identity(adapter: AdapterParams) -> bool:
    eye = np.eye(adapter.n_channels)
    return all(
        np.array_equal(t.data, eye) if name.startswith("M") else not np.any(t.data)
        for name, t in adapter.named_tensors()
    )


# ------------------------------------------------------------------ stages


def train_source(
    classifier: ClassifierParams,
    data: Dataset,
    cfg: TrainConfig,
    adapter: Optional[AdapterParams] = None,
) -> tuple[ClassifierParams, TrainReport]:
    """Stage I: minibatch Adam on mean cross-entropy over source windows.

    A held-out ``val_fraction`` of windows (stratified) drives early stopping;
    the best-validation parameters are kept.
    """
    if len(data) == 0:
        raise DataError("source dataset is empty")
    if adapter is not None and not _is_identity(adapter):
        raise ContractError("stage I requires an identity adapter")
    X, y = data.arrays()
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _holdout_split(y, cfg.val_fraction, rng)
    if len(val_idx) == 0:
        val_idx = train_idx

    frozen_flags = None
    if adapter is not None:
        frozen_flags = [t.requires_grad for t in adapter.parameters()]
        mdl.set_trainable(adapter, False)
    mdl.set_trainable(classifier, True)
    try:
        report = _run_epochs(
            "source", classifier.parameters(), classifier, adapter,
            X[train_idx], y[train_idx], X[val_idx], y[val_idx],
            cfg, rng, mode="train",
        )
    finally:
        if adapter is not None:
            for t, flag in zip(adapter.parameters(), frozen_flags):
                t.requires_grad = flag
                t.grad = np.zeros_like(t.data) if flag else None
    classifier.stage = "source-trained"
    return classifier, report


def adapt_target(
    classifier: ClassifierParams,
    adapter: AdapterParams,
    target_data: Dataset,
    cfg: TrainConfig,
    labelled_idx: Optional[np.ndarray] = None,
) -> tuple[AdapterParams, TrainReport]:
    """Stage II: train only the adapter through the frozen classifier.

    Uses a stratified ``target_label_fraction`` of the windows unless
    ``labelled_idx`` is given. The frozen classifier runs in eval mode and
    early stopping watches the labelled-subset loss.
    """
    mdl.require_trained(classifier)
    if len(target_data) == 0:
        raise DataError("target dataset is empty")
    if adapter.n_channels != classifier.n_channels:
        raise ContractError("adapter and classifier disagree on channel count")
    X, y = target_data.arrays()
    rng = np.random.default_rng(cfg.seed)
    if labelled_idx is None:
        labelled_idx = stratified_sample(y, cfg.target_label_fraction, rng)
    labelled_idx = np.asarray(labelled_idx)
    if labelled_idx.size == 0:
        raise DataError("no labelled target windows")

    flags = [t.requires_grad for t in classifier.parameters()]
    mdl.set_trainable(classifier, False)
    mdl.set_trainable(adapter, True)
    try:
        report = _run_epochs(
            "adapt", adapter.parameters(), classifier, adapter,
            X[labelled_idx], y[labelled_idx], X[labelled_idx], y[labelled_idx],
            cfg, rng, mode="eval",
        )
    finally:
        for t, flag in zip(classifier.parameters(), flags):
            t.requires_grad = flag
            t.grad = np.zeros_like(t.data) if flag else None
    return adapter, report


def evaluate(
    classifier: ClassifierParams,
    adapter: Optional[AdapterParams],
    data: Dataset,
    histogram_cfg: Optional[HistogramConfig] = None,
) -> tuple[float, LossDistribution]:
    """Eval-mode accuracy (percent) and per-window loss distribution."""
    if len(data) == 0:
        raise DataError("dataset is empty")
    X, y = data.arrays()
    logits = mdl.predict_logits(classifier, adapter, X)
    return accuracy(logits, y), LossDistribution.from_losses(mdl.window_losses(logits, y), histogram_cfg)
