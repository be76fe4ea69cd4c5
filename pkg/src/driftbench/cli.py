"""Command-line interface: ``driftbench {synth,train,adapt,eval,divergence}``.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then command-line flags (flags win). Exit codes: 0 on success, 1 on a
numeric or training failure, 2 on a usage, configuration or data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import dataio as dio
from . import model as mdl
from . import trainer as tr
from .dataio import PreprocessConfig, ShiftSpec, Standardizer, WindowConfig
from .divergence import REPORT_SCHEMA, HistogramConfig, divergence_report, window_features, write_histogram_csv
from .errors import ConfigError, DataError, DriftbenchError, NumericError, TrainingError
from .experiment import adapted_windows
from .trainer import TrainConfig

log = logging.getLogger("driftbench")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


@dataclass
class RunConfig:
    # no default: every run must name its seed
    seed: Optional[int] = None
    manifest: Optional[str] = None
    target_manifest: Optional[str] = None
    checkpoint: Optional[str] = None
    adapter_checkpoint: Optional[str] = None
    adapter: str = "linear"
    out_dir: str = "runs"
    shift: str = "affine"
    # extra ShiftSpec fields (gamma, condition_target, noise_sigma, ...)
    shift_params: dict = field(default_factory=dict)
    n_classes: int = 4
    n_channels: int = 8
    trials_per_class: int = 20
    frames: int = 300
    sample_rate_hz: float = 1000.0
    hidden_size: int = 32
    depth: int = 2
    fc_units: int = 32
    smooth_frames: Optional[int] = None
    window: WindowConfig = field(default_factory=lambda: WindowConfig(50, 25))
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: TrainConfig = field(default_factory=tr.stage_two_defaults)
    histogram: HistogramConfig = field(default_factory=HistogramConfig)

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("a seed is required (--seed or \"seed\" in --config)")
        if self.adapter not in mdl.ADAPTER_KINDS:
            raise ConfigError(f"adapter must be one of {mdl.ADAPTER_KINDS}, got {self.adapter!r}")
        if self.shift not in dio.SHIFT_KINDS:
            raise ConfigError(f"shift must be one of {dio.SHIFT_KINDS}, got {self.shift!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        nested = {"window": WindowConfig, "train": TrainConfig, "adapt": TrainConfig, "histogram": HistogramConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            for key, typ in nested.items():
                if key in d:
                    d[key] = typ(**d[key])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None

    def shift_spec(self) -> ShiftSpec:
        params = dict(self.shift_params)
        params.setdefault("seed", self.seed + 100)
        return ShiftSpec.from_dict(dict(params, kind=self.shift))

    def model_config(self) -> mdl.ModelConfig:
        return mdl.ModelConfig(self.n_channels, self.n_classes, self.hidden_size, self.depth, self.fc_units)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def adapt_config(self) -> TrainConfig:
        return dataclasses.replace(self.adapt, seed=self.seed)


# fields each command reads from disk; optional ones only when set
INPUTS = {
    "synth": ((), ()),
    "train": (("manifest",), ()),
    "adapt": (("checkpoint", "target_manifest"), ()),
    "eval": (("checkpoint", "manifest"), ("adapter_checkpoint",)),
    "divergence": (("checkpoint", "manifest", "target_manifest"), ("adapter_checkpoint",)),
}


def validate_inputs(command: str, cfg: RunConfig) -> None:
    """Fail before any work if an input path is missing."""
    required, optional = INPUTS[command]
    for name in required + tuple(n for n in optional if getattr(cfg, n) is not None):
        _existing(getattr(cfg, name), "--" + name.replace("_", "-"))


# ------------------------------------------------------------------ helpers


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def _existing(path: Optional[str], flag: str) -> Path:
    p = Path(_require(path, flag))
    if not p.is_file():
        raise ConfigError(f"{flag}: no such file: {p}")
    return p


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _load_trials(path: Path) -> list[dio.Trial]:
    trials = dio.load_trials(path)
    if not trials:
        raise DataError(f"{path}: manifest lists no trials")
    return trials


def _load_classifier(cfg: RunConfig):
    path = _existing(cfg.checkpoint, "--checkpoint")
    clf, header = mdl.load_checkpoint(path)
    if header["kind"] != "classifier":
        raise ConfigError(f"{path}: not a classifier checkpoint")
    extra = header.get("extra", {})
    try:
        stats = Standardizer.from_dict(extra["stats"])
        window = WindowConfig(**extra["window"])
        prep = PreprocessConfig(**extra.get("preprocess", {}))
    except KeyError as exc:
        raise ConfigError(f"{path}: checkpoint lacks preprocessing metadata ({exc})") from None
    return clf, stats, window, prep, path


def _load_adapter(path_str: Optional[str], clf) -> Optional[mdl.AdapterParams]:
    if path_str is None:
        return None
    path = _existing(path_str, "--adapter-checkpoint")
    adapter, header = mdl.load_checkpoint(path)
    if header["kind"] != "adapter":
        raise ConfigError(f"{path}: not an adapter checkpoint")
    if adapter.n_channels != clf.n_channels:
        raise ConfigError(f"{path}: adapter has {adapter.n_channels} channels, classifier {clf.n_channels}")
    return adapter


def _dataset(trials, stats, window, prep, n_classes, tag):
    return dio.build_dataset(trials, stats, window, n_classes, preprocess_cfg=prep, provenance=tag)


# ----------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> dict:
    """Write a source manifest and a shifted copy of the same trials as target."""
    out = Path(cfg.out_dir)
    spec = cfg.shift_spec()
    trials = dio.synth_gestures(
        cfg.n_classes, cfg.n_channels, cfg.trials_per_class, cfg.frames, cfg.seed,
        sample_rate_hz=cfg.sample_rate_hz,
    )
    source = dio.save_trials(trials, out / "source")
    target = dio.save_trials(dio.apply_shift(trials, spec), out / "target")
    (out / "shift.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"source_manifest": str(source), "target_manifest": str(target), "n_trials": len(trials)}


def cmd_train(cfg: RunConfig) -> dict:
    manifest = _existing(cfg.manifest, "--manifest")
    trials = _load_trials(manifest)
    n_channels = trials[0].n_channels
    n_classes = max(cfg.n_classes, 1 + max(t.gesture for t in trials))
    prep = PreprocessConfig(cfg.smooth_frames)
    stats = dio.fit_standardizer(trials)
    data = _dataset(trials, stats, cfg.window, prep, n_classes, "source")
    model_cfg = dataclasses.replace(cfg.model_config(), n_channels=n_channels, n_classes=n_classes)
    clf = mdl.init_classifier(model_cfg, np.random.default_rng(cfg.seed))
    clf, report = tr.train_source(clf, data, cfg.train_config())
    acc, losses = tr.evaluate(clf, None, data, cfg.histogram)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "classifier.ckpt"
    extra = {
        "stats": stats.to_dict(),
        "window": dataclasses.asdict(cfg.window),
        "preprocess": dataclasses.asdict(prep),
    }
    mdl.save_checkpoint(ckpt, clf, cfg.seed, extra)
    (out / "train_report.jsonl").write_text(report.to_jsonl())
    return {"checkpoint": str(ckpt), "train_accuracy": acc, "train_mean_loss": losses.mean,
            "epochs_run": report.epochs_run}


def cmd_adapt(cfg: RunConfig) -> dict:
    clf, stats, window, prep, ckpt = _load_classifier(cfg)
    before = _digest(ckpt)
    trials = _load_trials(_existing(cfg.target_manifest, "--target-manifest"))
    data = _dataset(trials, stats, window, prep, clf.n_classes, "target")
    _, y = data.arrays()
    adapt_cfg = cfg.adapt_config()
    labelled = tr.stratified_sample(y, adapt_cfg.target_label_fraction, np.random.default_rng(cfg.seed))
    rest = np.setdiff1d(np.arange(len(y)), labelled)
    held = data.subset(rest) if len(rest) else data
    pre_acc, _ = tr.evaluate(clf, None, held, cfg.histogram)

    adapter = mdl.identity_adapter(cfg.adapter, clf.n_channels)
    adapter, report = tr.adapt_target(clf, adapter, data, adapt_cfg, labelled_idx=labelled)
    post_acc, post_losses = tr.evaluate(clf, adapter, held, cfg.histogram)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(cfg.adapter_checkpoint) if cfg.adapter_checkpoint else out / f"adapter_{cfg.adapter}.ckpt"
    mdl.save_checkpoint(path, adapter, cfg.seed, {"labelled": int(len(labelled))})
    (out / f"adapt_report_{cfg.adapter}.jsonl").write_text(report.to_jsonl())
    if _digest(ckpt) != before:
        raise TrainingError(f"{ckpt}: classifier checkpoint changed during adaptation")
    return {"adapter_checkpoint": str(path), "adapter": cfg.adapter, "pre_accuracy": pre_acc,
            "post_accuracy": post_acc, "post_mean_loss": post_losses.mean, "n_labelled": int(len(labelled)),
            "epochs_run": report.epochs_run}


def cmd_eval(cfg: RunConfig) -> dict:
    clf, stats, window, prep, _ = _load_classifier(cfg)
    adapter = _load_adapter(cfg.adapter_checkpoint, clf)
    trials = _load_trials(_existing(cfg.manifest, "--manifest"))
    data = _dataset(trials, stats, window, prep, clf.n_classes, "eval")
    acc, losses = tr.evaluate(clf, adapter, data, cfg.histogram)
    result = {"accuracy": acc, "mean_loss": losses.mean, "n_windows": len(losses),
              "adapter": adapter.kind if adapter else None}
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def cmd_divergence(cfg: RunConfig) -> dict:
    clf, stats, window, prep, _ = _load_classifier(cfg)
    adapter = _load_adapter(cfg.adapter_checkpoint, clf)
    source = _dataset(_load_trials(_existing(cfg.manifest, "--manifest")), stats, window, prep, clf.n_classes, "source")
    target = _dataset(_load_trials(_existing(cfg.target_manifest, "--target-manifest")),
                      stats, window, prep, clf.n_classes, "target")
    s_acc, s_losses = tr.evaluate(clf, None, source, cfg.histogram)
    s_feat = window_features(source)
    X_t, _ = target.arrays()

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_histogram_csv(out / "hist_source.csv", s_losses.histogram)
    result = {}
    stages = [("pre", None)] + ([("post", adapter)] if adapter is not None else [])
    for name, a in stages:
        t_acc, t_losses = tr.evaluate(clf, a, target, cfg.histogram)
        report = divergence_report(
            s_losses, t_losses, s_feat, window_features(adapted_windows(a, X_t)),
            f"{name}-DA", seed=cfg.seed, source_accuracy=s_acc, target_accuracy=t_acc,
        )
        payload = report.to_dict()
        jsonschema.validate(payload, REPORT_SCHEMA)
        (out / f"divergence_{name}.json").write_text(report.to_json())
        write_histogram_csv(out / f"hist_target_{name}.csv", t_losses.histogram)
        result[name] = payload
    return result


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "divergence": cmd_divergence,
}

HELP = {
    "synth": "generate synthetic source trials and a shifted target copy",
    "train": "stage I: train the classifier on a source manifest",
    "adapt": "stage II: train an adapter on labelled target windows",
    "eval": "accuracy and mean loss of a checkpoint on a manifest",
    "divergence": "pre/post-adaptation divergence reports and loss histograms",
}


# --------------------------------------------------------------- arguments


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, help="seed for data, initialization and shuffling")
        p.add_argument("--manifest", help="source (or evaluation) trial manifest")
        p.add_argument("--target-manifest", help="target-domain trial manifest")
        p.add_argument("--checkpoint", help="classifier checkpoint (written by train, read otherwise)")
        p.add_argument("--adapter-checkpoint", help="adapter checkpoint (written by adapt, read otherwise)")
        p.add_argument("--adapter", choices=mdl.ADAPTER_KINDS, help="adapter kind for stage II")
        p.add_argument("--target-fraction", type=float, help="fraction of target windows labelled for stage II")
        p.add_argument("--out-dir", help="directory for reports, checkpoints and generated data")
        p.add_argument("--shift", choices=dio.SHIFT_KINDS, help="synthetic shift applied to the target copy")
        p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"--config: cannot read {args.config} ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: {args.config} is not valid JSON ({exc})") from None
        if not isinstance(base, dict):
            raise ConfigError("--config must hold a JSON object")
    flags = {
        "seed": args.seed,
        "manifest": args.manifest,
        "target_manifest": args.target_manifest,
        "checkpoint": args.checkpoint,
        "adapter_checkpoint": args.adapter_checkpoint,
        "adapter": args.adapter,
        "out_dir": args.out_dir,
        "shift": args.shift,
    }
    base.update({k: v for k, v in flags.items() if v is not None})
    if args.target_fraction is not None:
        base["adapt"] = dict(base.get("adapt", {}), target_label_fraction=args.target_fraction)
    return RunConfig.from_dict(base)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        validate_inputs(args.command, cfg)
        result = COMMANDS[args.command](cfg)
    except (NumericError, TrainingError) as exc:
        print(f"driftbench {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DriftbenchError, jsonschema.ValidationError) as exc:
        print(f"driftbench {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"driftbench {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _emit(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
