"""Source-data-absent domain divergence from cross-entropy loss distributions.

A classifier trained on the source domain is evaluated window by window on
another domain. The per-window losses form an empirical distribution whose
mean estimates the cross-entropy between domains. Their mean difference lower
bounds the Wasserstein distance between the two loss distributions.

Jensen-Shannon divergence over loss histograms and the Proxy-A distance of a
linear domain classifier are provided as baselines.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, rel_entr

from .dataio import Dataset
from .errors import ConfigError, DataError
from .model import predict_logits, window_losses

MIN_DOMAIN_WINDOWS = 10
# ln 2 plus rounding slack
JS_MAX = float(np.log(2.0)) + 1e-12


@dataclass
class HistogramConfig:
    bins: int = 64
    low: float = 0.0
    high: float = 8.0

    def __post_init__(self):
        if self.bins < 1 or not self.high > self.low:
            raise ConfigError("histogram needs bins >= 1 and high > low")

    def edges(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.bins + 1)


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @classmethod
    def of(cls, values: np.ndarray, cfg: HistogramConfig) -> "Histogram":
        edges = cfg.edges()
        # everything above the range lands in the last bin
        clipped = np.clip(values, cfg.low, cfg.high)
        counts, _ = np.histogram(clipped, bins=edges)
        return cls(edges, counts.astype(np.int64))

    def probabilities(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            raise DataError("histogram is empty")
        return self.counts / total


@dataclass
class LossDistribution:
    losses: np.ndarray
    mean: float
    histogram: Histogram

    @classmethod
    def from_losses(cls, losses, cfg: Optional[HistogramConfig] = None) -> "LossDistribution":
        losses = np.asarray(losses, dtype=np.float64).reshape(-1)
        if losses.size == 0:
            raise DataError("loss distribution needs at least one window")
        if np.any(losses < 0):
            raise DataError("cross-entropy losses must be non-negative")
        cfg = cfg or HistogramConfig()
        return cls(losses, float(np.mean(losses)), Histogram.of(losses, cfg))

    def __len__(self) -> int:
        return self.losses.size


def loss_distribution(classifier, adapter, data: Dataset, histogram_cfg: Optional[HistogramConfig] = None) -> LossDistribution:
    if len(data) == 0:
        raise DataError("dataset is empty")
    X, y = data.arrays()
    losses = window_losses(predict_logits(classifier, adapter, X), y)
    return LossDistribution.from_losses(losses, histogram_cfg)


def wasserstein_lower_bound(a: LossDistribution, b: LossDistribution) -> float:
    return abs(a.mean - b.mean)


def js_divergence(a: Histogram, b: Histogram) -> float:
    """Jensen-Shannon divergence in nats; both histograms share bin edges."""
    if a.edges.shape != b.edges.shape or not np.array_equal(a.edges, b.edges):
        raise ConfigError("histograms must share identical bin edges")
    p, q = a.probabilities(), b.probabilities()
    m = 0.5 * (p + q)
    return float(0.5 * (rel_entr(p, m).sum() + rel_entr(q, m).sum()))


def window_features(data) -> np.ndarray:
    """Per-window channel means followed by channel standard deviations.

    ``data`` is a Dataset or a ``[N, T, f]`` array of windows.
    """
    X = data.arrays()[0] if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if X.ndim != 3:
        raise DataError(f"windows must be [N, T, f], got shape {X.shape}")
    return np.concatenate([X.mean(axis=1), X.std(axis=1)], axis=1)


def _split(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_test = max(1, int(round(0.2 * n)))
    return perm[n_test:], perm[:n_test]


def proxy_a_from_risk(risk: float) -> float:
    """``2 (1 - 2 risk)`` clamped to ``[0, 2]``; a worse-than-chance classifier scores 0."""
    return float(np.clip(2.0 * (1.0 - 2.0 * risk), 0.0, 2.0))


def proxy_a_distance(
    source_features: np.ndarray,
    target_features: np.ndarray,
    seed: int = 0,
    epochs: int = 500,
    lr: float = 0.01,
) -> tuple[float, float]:
    """Proxy-A distance and the linear domain classifier's test risk.

    Logistic regression by full-batch gradient descent on pooled-standardized
    features, 80/20 split per domain, smaller domain oversampled for training.
    Risk is the balanced test error.
    """
    S = np.asarray(source_features, dtype=np.float64)
    T = np.asarray(target_features, dtype=np.float64)
    if S.ndim != 2 or T.ndim != 2 or S.shape[1] != T.shape[1]:
        raise DataError("feature sets must be 2-D arrays with matching width")
    if len(S) < MIN_DOMAIN_WINDOWS or len(T) < MIN_DOMAIN_WINDOWS:
        raise DataError(f"each domain needs at least {MIN_DOMAIN_WINDOWS} windows")
    rng = np.random.default_rng(seed)
    pooled = np.concatenate([S, T])
    mu = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    S, T = (S - mu) / sd, (T - mu) / sd

    s_train, s_test = _split(len(S), rng)
    t_train, t_test = _split(len(T), rng)
    n = max(len(s_train), len(t_train))
    if len(s_train) < n:
        s_train = np.concatenate([s_train, rng.choice(s_train, n - len(s_train))])
    if len(t_train) < n:
        t_train = np.concatenate([t_train, rng.choice(t_train, n - len(t_train))])
    X = np.concatenate([S[s_train], T[t_train]])
    y = np.concatenate([np.zeros(n), np.ones(n)])

    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(epochs):
        err = expit(X @ w + b) - y
        w -= lr * (X.T @ err) / len(y)
        b -= lr * err.mean()

    err_s = np.mean(S[s_test] @ w + b > 0)
    err_t = np.mean(T[t_test] @ w + b <= 0)
    risk = float(0.5 * (err_s + err_t))
    return proxy_a_from_risk(risk), risk


@dataclass
class DivergenceReport:
    mu_source: float
    mu_target: float
    wasserstein_lower_bound: float
    kl_estimate: float
    js_divergence: float
    proxy_a: float
    domain_classifier_risk: float
    pre_post_tag: str
    source_accuracy: Optional[float] = None
    target_accuracy: Optional[float] = None
    n_source: int = 0
    n_target: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def divergence_report(
    source_losses: LossDistribution,
    target_losses: LossDistribution,
    source_features: np.ndarray,
    target_features: np.ndarray,
    tag: str,
    seed: int = 0,
    source_accuracy: Optional[float] = None,
    target_accuracy: Optional[float] = None,
) -> DivergenceReport:
    """Bundle all divergence metrics for one source/target pair.

    ``kl_estimate`` is ``mu_target - mu_source`` clamped at zero: the target mean
    is the empirical cross-entropy, and the source mean stands in for the source
    entropy, which cannot be observed without source data.
    """
    if tag not in ("pre-DA", "post-DA"):
        raise ConfigError(f"tag must be 'pre-DA' or 'post-DA', got {tag!r}")
    proxy, risk = proxy_a_distance(source_features, target_features, seed=seed)
    return DivergenceReport(
        mu_source=source_losses.mean,
        mu_target=target_losses.mean,
        wasserstein_lower_bound=wasserstein_lower_bound(source_losses, target_losses),
        kl_estimate=max(0.0, target_losses.mean - source_losses.mean),
        js_divergence=js_divergence(source_losses.histogram, target_losses.histogram),
        proxy_a=proxy,
        domain_classifier_risk=risk,
        pre_post_tag=tag,
        source_accuracy=source_accuracy,
        target_accuracy=target_accuracy,
        n_source=len(source_losses),
        n_target=len(target_losses),
    )


REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "mu_source", "mu_target", "wasserstein_lower_bound", "kl_estimate",
        "js_divergence", "proxy_a", "domain_classifier_risk", "pre_post_tag",
    ],
    "properties": {
        "mu_source": {"type": "number", "minimum": 0},
        "mu_target": {"type": "number", "minimum": 0},
        "wasserstein_lower_bound": {"type": "number", "minimum": 0},
        "kl_estimate": {"type": "number", "minimum": 0},
        "js_divergence": {"type": "number", "minimum": 0, "maximum": JS_MAX},
        "proxy_a": {"type": "number", "minimum": 0, "maximum": 2},
        "domain_classifier_risk": {"type": "number", "minimum": 0, "maximum": 1},
        "pre_post_tag": {"enum": ["pre-DA", "post-DA"]},
        "source_accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "target_accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "n_source": {"type": "integer", "minimum": 0},
        "n_target": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}


def write_histogram_csv(path, hist: Histogram) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, n in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(n)])
