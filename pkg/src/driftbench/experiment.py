"""End-to-end synthetic experiment: synth, split, train, shift, adapt, measure.

Trials of every class are split by position into three disjoint groups:

* source: stage-I training (its own validation split is carved out inside)
* holdout: intra-source accuracy and the source loss distribution
* pool: shifted to form the target domain; a stratified fraction of the
  pool windows is labelled for stage II and the rest is evaluation data

Every target variant (no-shift control, affine, nonlinear) reuses the same
pool trials and the same labelled/evaluation window indices, so results are
directly comparable.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataio as dio
from . import model as mdl
from . import tensor as tn
from . import trainer as tr
from .dataio import Dataset, ShiftSpec, Standardizer, Trial, WindowConfig
from .divergence import (
    DivergenceReport,
    HistogramConfig,
    LossDistribution,
    divergence_report,
    window_features,
    write_histogram_csv,
)
from .errors import ConfigError
from .model import AdapterParams, ClassifierParams, ModelConfig
from .trainer import TrainConfig, TrainReport


@dataclass
class ExperimentConfig:
    """Desk-scale synthetic setup. ``seed`` drives data, training and shifts."""

    seed: int = 0
    n_classes: int = 4
    n_channels: int = 8
    trials_per_class: int = 40
    frames: int = 300
    sample_rate_hz: float = 1000.0
    source_trials: int = 20
    holdout_trials: int = 10
    window: WindowConfig = field(default_factory=lambda: WindowConfig(50, 25))
    hidden_size: int = 32
    depth: int = 2
    fc_units: int = 32
    source_train: TrainConfig = field(default_factory=TrainConfig)
    adapt_train: TrainConfig = field(default_factory=tr.stage_two_defaults)
    histogram: HistogramConfig = field(default_factory=HistogramConfig)
    # shift seeds are offset so the shift draw is not correlated with the data draw
    shift_seed_offset: int = 100

    def __post_init__(self):
        if self.source_trials < 1 or self.holdout_trials < 1:
            raise ConfigError("source_trials and holdout_trials must be >= 1")
        if self.trials_per_class <= self.source_trials + self.holdout_trials:
            raise ConfigError("trials_per_class must leave trials for the target pool")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.n_channels, self.n_classes, self.hidden_size, self.depth, self.fc_units)

    def shift(self, kind: str, **overrides) -> ShiftSpec:
        return ShiftSpec(kind, seed=self.seed + self.shift_seed_offset, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {
            "window": WindowConfig,
            "source_train": TrainConfig,
            "adapt_train": TrainConfig,
            "histogram": HistogramConfig,
        }
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**d)


def split_trials(trials: Sequence[Trial], cfg: ExperimentConfig) -> tuple[list[Trial], list[Trial], list[Trial]]:
    """Per-class positional split into (source, holdout, pool)."""
    by_class: dict[int, list[Trial]] = {}
    for t in trials:
        by_class.setdefault(t.gesture, []).append(t)
    a, b = cfg.source_trials, cfg.source_trials + cfg.holdout_trials
    source, holdout, pool = [], [], []
    for g in sorted(by_class):
        group = by_class[g]
        source += group[:a]
        holdout += group[a:b]
        pool += group[b:]
    return source, holdout, pool


@dataclass
class SourceStage:
    cfg: ExperimentConfig
    stats: Standardizer
    classifier: ClassifierParams
    report: TrainReport
    holdout: Dataset
    pool_trials: list[Trial]
    source_accuracy: float
    source_losses: LossDistribution

    def build(self, trials: Sequence[Trial], provenance: str = "") -> Dataset:
        return dio.build_dataset(trials, self.stats, self.cfg.window, self.cfg.n_classes, provenance=provenance)


def prepare_source(cfg: ExperimentConfig) -> SourceStage:
    """Generate the data and run stage I on the source split."""
    trials = dio.synth_gestures(
        cfg.n_classes, cfg.n_channels, cfg.trials_per_class, cfg.frames, cfg.seed,
        sample_rate_hz=cfg.sample_rate_hz,
    )
    source, holdout, pool = split_trials(trials, cfg)
    stats = dio.fit_standardizer(source)
    train_data = dio.build_dataset(source, stats, cfg.window, cfg.n_classes, provenance="source")
    holdout_data = dio.build_dataset(holdout, stats, cfg.window, cfg.n_classes, provenance="holdout")

    classifier = mdl.init_classifier(cfg.model_config(), np.random.default_rng(cfg.seed))
    train_cfg = dataclasses.replace(cfg.source_train, seed=cfg.seed)
    classifier, report = tr.train_source(classifier, train_data, train_cfg)
    acc, losses = tr.evaluate(classifier, None, holdout_data, cfg.histogram)
    return SourceStage(cfg, stats, classifier, report, holdout_data, pool, acc, losses)


@dataclass
class AdaptOutcome:
    kind: str
    adapter: AdapterParams
    report: TrainReport
    accuracy: float
    losses: LossDistribution
    divergence: DivergenceReport


@dataclass
class ShiftOutcome:
    spec: ShiftSpec
    labelled_idx: np.ndarray
    eval_data: Dataset
    pre_accuracy: float
    pre_losses: LossDistribution
    pre_divergence: DivergenceReport
    adapted: dict[str, AdaptOutcome] = field(default_factory=dict)


def adapted_windows(adapter: Optional[AdapterParams], X: np.ndarray) -> np.ndarray:
    """Windows as the first LSTM layer sees them after the adapter."""
    if adapter is None:
        return X
    N, T, C = X.shape
    with tn.no_grad():
        return mdl.adapt(adapter, X.reshape(N * T, C)).data.reshape(N, T, C)


def labelled_split(labels: np.ndarray, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    labelled = tr.stratified_sample(labels, cfg.adapt_train.target_label_fraction, rng)
    rest = np.setdiff1d(np.arange(len(labels)), labelled)
    return labelled, rest


def run_shift(stage: SourceStage, spec: ShiftSpec, adapter_kinds: Sequence[str] = ()) -> ShiftOutcome:
    """Shift the pool, measure pre-DA, then adapt each requested kind."""
    cfg = stage.cfg
    target = stage.build(dio.apply_shift(stage.pool_trials, spec), f"target:{spec.kind}")
    _, y = target.arrays()
    labelled, rest = labelled_split(y, cfg)
    eval_data = target.subset(rest)
    X_eval, _ = eval_data.arrays()
    source_features = window_features(stage.holdout)

    def measure(adapter, tag):
        acc, losses = tr.evaluate(stage.classifier, adapter, eval_data, cfg.histogram)
        report = divergence_report(
            stage.source_losses, losses, source_features, window_features(adapted_windows(adapter, X_eval)),
            tag, seed=cfg.seed, source_accuracy=stage.source_accuracy, target_accuracy=acc,
        )
        return acc, losses, report

    pre_acc, pre_losses, pre_report = measure(None, "pre-DA")
    outcome = ShiftOutcome(spec, labelled, eval_data, pre_acc, pre_losses, pre_report)
    adapt_cfg = dataclasses.replace(cfg.adapt_train, seed=cfg.seed)
    for kind in adapter_kinds:
        adapter = mdl.identity_adapter(kind, cfg.n_channels)
        adapter, report = tr.adapt_target(stage.classifier, adapter, target, adapt_cfg, labelled_idx=labelled)
        acc, losses, post_report = measure(adapter, "post-DA")
        outcome.adapted[kind] = AdaptOutcome(kind, adapter, report, acc, losses, post_report)
    return outcome


def summarize(stage: SourceStage, outcomes: dict[str, ShiftOutcome]) -> dict:
    """Plain-dict record of one seed's results (deterministic)."""
    out = {
        "seed": stage.cfg.seed,
        "source_accuracy": stage.source_accuracy,
        "mu_source": stage.source_losses.mean,
        "source_epochs": stage.report.epochs_run,
        "shifts": {},
    }
    for name, o in outcomes.items():
        out["shifts"][name] = {
            "spec": o.spec.to_dict(),
            "pre": o.pre_divergence.to_dict(),
            "post": {k: a.divergence.to_dict() for k, a in o.adapted.items()},
            "adapt_epochs": {k: a.report.epochs_run for k, a in o.adapted.items()},
        }
    return out


def default_plan(cfg: ExperimentConfig) -> dict[str, tuple[ShiftSpec, tuple[str, ...]]]:
    """The no-shift control adapted linearly, an affine shift adapted linearly
    and a nonlinear shift adapted with both kinds."""
    return {
        "control": (cfg.shift("none"), ("linear",)),
        "affine": (cfg.shift("affine"), ("linear",)),
        "nonlinear": (cfg.shift("nonlinear"), ("linear", "deep")),
    }


def run_seed(cfg: ExperimentConfig, plan: Optional[dict[str, tuple[ShiftSpec, Sequence[str]]]] = None):
    """Source stage plus every shift in ``plan`` (name -> (spec, adapter kinds))."""
    stage = prepare_source(cfg)
    plan = default_plan(cfg) if plan is None else plan
    outcomes = {name: run_shift(stage, spec, kinds) for name, (spec, kinds) in plan.items()}
    return stage, outcomes


def write_reports(directory, stage: SourceStage, outcomes: dict[str, ShiftOutcome]) -> list[Path]:
    """Write train logs, divergence reports and loss histograms; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        p = d / name
        p.write_text(text)
        written.append(p)

    put("train_source.jsonl", stage.report.to_jsonl())
    put("summary.json", json.dumps(summarize(stage, outcomes), indent=2, sort_keys=True) + "\n")
    hist = d / "hist_source.csv"
    write_histogram_csv(hist, stage.source_losses.histogram)
    written.append(hist)
    for name, o in outcomes.items():
        put(f"divergence_{name}_pre.json", o.pre_divergence.to_json())
        p = d / f"hist_{name}_pre.csv"
        write_histogram_csv(p, o.pre_losses.histogram)
        written.append(p)
        for kind, a in o.adapted.items():
            put(f"train_adapt_{name}_{kind}.jsonl", a.report.to_jsonl())
            put(f"divergence_{name}_post_{kind}.json", a.divergence.to_json())
            p = d / f"hist_{name}_post_{kind}.csv"
            write_histogram_csv(p, a.losses.histogram)
            written.append(p)
    return written
