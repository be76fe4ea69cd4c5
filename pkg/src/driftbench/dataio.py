"""Trial ingestion, preprocessing, windowing and synthetic domain shifts.

On-disk layout: one CSV per trial (one row per frame, one column per channel,
no header) and a JSON manifest listing the trials::

    [{"path": "g0_t000.csv", "gesture": 0, "subject": 0, "session": 0,
      "trial": 0, "sample_rate_hz": 1000.0}, ...]

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError, SegmentationError, SpecError

log = logging.getLogger(__name__)

MAX_WINDOW_MS = 300.0
STD_FLOOR = 1e-9
MANIFEST_FIELDS = ("path", "gesture", "subject", "session", "trial", "sample_rate_hz")


@dataclass
class Trial:
    samples: np.ndarray
    sample_rate_hz: float
    gesture: int
    subject: int = 0
    session: int = 0
    trial_no: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise DataError(f"trial samples must be a non-empty T x C matrix, got {self.samples.shape}")
        if min(self.gesture, self.subject, self.session, self.trial_no) < 0:
            raise DataError("trial metadata ids must be non-negative")
        if not self.sample_rate_hz > 0:
            raise DataError("sample_rate_hz must be positive")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    def replace(self, samples: np.ndarray) -> "Trial":
        return Trial(samples, self.sample_rate_hz, self.gesture, self.subject, self.session, self.trial_no)


@dataclass
class Window:
    data: np.ndarray
    label: int
    domain: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DataError(f"window must be T x C, got {self.data.shape}")
        if np.any(self.data < 0):
            raise DataError("window values must be non-negative (rectified)")


@dataclass
class Dataset:
    windows: list[Window]
    G: int
    f: int
    provenance: str = ""

    def __post_init__(self):
        for w in self.windows:
            if not 0 <= w.label < self.G:
                raise DataError(f"label {w.label} outside [0, {self.G})")
            if w.data.shape[1] != self.f:
                raise DataError(f"window has {w.data.shape[1]} channels, dataset expects {self.f}")

    def __len__(self) -> int:
        return len(self.windows)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``X [N, T, f]`` and labels ``y [N]``."""
        if not self.windows:
            raise DataError("dataset is empty")
        X = np.stack([w.data for w in self.windows])
        y = np.array([w.label for w in self.windows], dtype=np.int64)
        return X, y

    def subset(self, idx: Sequence[int], provenance: Optional[str] = None) -> "Dataset":
        return Dataset([self.windows[i] for i in idx], self.G, self.f, provenance or self.provenance)


# ---------------------------------------------------------------------- files


def _read_csv(path: Path) -> np.ndarray:
    rows = []
    width = None
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ParseError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} columns, found {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric cell") from None
    if not rows:
        raise ParseError(f"{path}: empty trial file")
    arr = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{path}: non-finite value")
    return arr


def _write_csv(path: Path, samples: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        for row in samples:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def load_trials(manifest_path) -> list[Trial]:
    manifest_path = Path(manifest_path)
    try:
        entries = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise ParseError(f"{manifest_path}: cannot read manifest ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(entries, list):
        raise ParseError(f"{manifest_path}: manifest must be a JSON array")
    base = manifest_path.parent
    trials = []
    for k, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ParseError(f"{manifest_path}: entry {k} is not an object")
        missing = [name for name in MANIFEST_FIELDS if name not in entry]
        if missing:
            raise ParseError(f"{manifest_path}: entry {k} lacks {', '.join(missing)}")
        samples = _read_csv(base / entry["path"])
        try:
            trials.append(Trial(
                samples,
                float(entry["sample_rate_hz"]),
                int(entry["gesture"]),
                int(entry["subject"]),
                int(entry["session"]),
                int(entry["trial"]),
            ))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{manifest_path}: entry {k}: {exc}") from None
    return trials


def save_trials(trials: Sequence[Trial], directory, manifest_name: str = "manifest.json") -> Path:
    """Write one CSV per trial plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, tr in enumerate(trials):
        name = f"trial_{k:04d}_g{tr.gesture}.csv"
        _write_csv(directory / name, tr.samples)
        entries.append({
            "path": name,
            "gesture": tr.gesture,
            "subject": tr.subject,
            "session": tr.session,
            "trial": tr.trial_no,
            "sample_rate_hz": tr.sample_rate_hz,
        })
    manifest = directory / manifest_name
    manifest.write_text(json.dumps(entries, indent=1) + "\n")
    return manifest


# -------------------------------------------------------------- preprocessing


@dataclass
class PreprocessConfig:
    # None picks 16 frames at 1 kHz, 3 at 100 Hz (scaled linearly in between)
    smooth_frames: Optional[int] = None

    def smoothing_for(self, sample_rate_hz: float) -> int:
        if self.smooth_frames is not None:
            if self.smooth_frames < 1:
                raise ConfigError("smooth_frames must be >= 1")
            return self.smooth_frames
        return default_smoothing(sample_rate_hz)


def default_smoothing(sample_rate_hz: float) -> int:
    if sample_rate_hz >= 1000:
        return 16
    if sample_rate_hz <= 100:
        return 3
    return int(round(3 + 13 * (sample_rate_hz - 100) / 900))


@dataclass
class Standardizer:
    """Per-channel statistics fitted once on source training trials."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def fit_standardizer(trials: Sequence[Trial]) -> Standardizer:
    if not trials:
        raise DataError("cannot fit standardization on zero trials")
    stacked = np.concatenate([t.samples for t in trials], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    low = std < STD_FLOOR
    if np.any(low):
        log.warning("channels %s have near-zero variance; adding %g", np.flatnonzero(low).tolist(), STD_FLOOR)
        std = np.where(low, std + STD_FLOOR, std)
    return Standardizer(mean, std)


def rectify(x: np.ndarray) -> np.ndarray:
    return np.abs(x)


def causal_moving_average(x: np.ndarray, length: int) -> np.ndarray:
    """Mean over the last ``length`` frames (fewer at the start) along axis 0."""
    if length < 1:
        raise ConfigError("moving-average length must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    csum = np.cumsum(x, axis=0)
    out = csum.copy()
    out[length:] = csum[length:] - csum[:-length]
    counts = np.minimum(np.arange(1, len(x) + 1), length).astype(np.float64)
    return out / counts.reshape((-1,) + (1,) * (x.ndim - 1))


def preprocess(trial: Trial, stats: Standardizer, cfg: Optional[PreprocessConfig] = None) -> Trial:
    """Standardize with source statistics, rectify, then smooth causally."""
    cfg = cfg or PreprocessConfig()
    if stats.mean.shape != (trial.n_channels,):
        raise DataError(f"standardizer has {stats.mean.shape[0]} channels, trial has {trial.n_channels}")
    z = (trial.samples - stats.mean) / stats.std
    smoothed = causal_moving_average(rectify(z), cfg.smoothing_for(trial.sample_rate_hz))
    # cumsum differencing can leave tiny negative residues
    return trial.replace(np.maximum(smoothed, 0.0))


def segment(trial: Trial, window_frames: int, stride_frames: int) -> list[Window]:
    """Overlapped sliding windows; a trailing partial window is discarded."""
    T = trial.samples.shape[0]
    if stride_frames < 1:
        raise SegmentationError("stride must be >= 1 frame")
    if window_frames < 1:
        raise SegmentationError("window must be >= 1 frame")
    if window_frames > T:
        raise SegmentationError(f"window of {window_frames} frames exceeds trial length {T}")
    duration_ms = window_frames * 1000.0 / trial.sample_rate_hz
    if duration_ms >= MAX_WINDOW_MS:
        raise SegmentationError(f"window lasts {duration_ms:.1f} ms; must be under {MAX_WINDOW_MS:.0f} ms")
    count = (T - window_frames) // stride_frames + 1
    domain = (trial.subject, trial.session)
    return [
        Window(trial.samples[s * stride_frames:s * stride_frames + window_frames].copy(), trial.gesture, domain)
        for s in range(count)
    ]


@dataclass
class WindowConfig:
    window_frames: int = 150
    stride_frames: int = 70


def build_dataset(
    trials: Sequence[Trial],
    stats: Standardizer,
    window: WindowConfig,
    n_classes: Optional[int] = None,
    preprocess_cfg: Optional[PreprocessConfig] = None,
    provenance: str = "",
) -> Dataset:
    """Preprocess and window trials; window order follows trial order."""
    if not trials:
        raise DataError("no trials to build a dataset from")
    f = trials[0].n_channels
    G = n_classes if n_classes is not None else max(t.gesture for t in trials) + 1
    windows: list[Window] = []
    for tr in trials:
        windows += segment(preprocess(tr, stats, preprocess_cfg), window.window_frames, window.stride_frames)
    return Dataset(windows, G, f, provenance)


# ------------------------------------------------------------ synthetic data


@dataclass
class GestureModel:
    """Per-class generative parameters; fixed by the generator seed."""

    amplitude: np.ndarray  # [G, C] carrier amplitude
    freqs: np.ndarray  # [G, C, K] carrier frequencies (Hz)
    env_freq: np.ndarray  # [G, C] envelope modulation frequency (Hz)
    env_depth: np.ndarray  # [G, C] envelope modulation depth


AMPLITUDE_LEVELS = (0.25, 0.6, 1.0, 1.6)


def gesture_model(n_classes: int, n_channels: int, rng: np.random.Generator, n_carriers: int = 3) -> GestureModel:
    # Each channel pairs classes up and gives a pair one shared amplitude, so no
    # single channel's level identifies every class. Two classes would then be
    # identical everywhere, so they get distinct levels instead.
    amp = np.empty((n_classes, n_channels))
    for c in range(n_channels):
        order = rng.permutation(n_classes)
        if n_classes == 2:
            amp[order, c] = rng.choice(AMPLITUDE_LEVELS, size=2, replace=False)
            continue
        levels = rng.choice(AMPLITUDE_LEVELS, size=(n_classes + 1) // 2)
        for rank, g in enumerate(order):
            amp[g, c] = levels[rank // 2]
    freqs = rng.uniform(20.0, 180.0, size=(n_classes, n_channels, n_carriers))
    env_freq = rng.uniform(1.0, 6.0, size=(n_classes, n_channels))
    env_depth = rng.uniform(0.1, 0.4, size=(n_classes, n_channels))
    return GestureModel(amp, freqs, env_freq, env_depth)


def synth_gestures(
    n_classes: int,
    n_channels: int,
    trials_per_class: int,
    frames: int,
    seed: int,
    sample_rate_hz: float = 1000.0,
    noise_sigma: float = 0.05,
    subject: int = 0,
    session: int = 0,
) -> list[Trial]:
    """Synthetic multi-channel gesture trials, ordered class by class.

    Each class mixes a few sinusoidal carriers per channel under a slow
    amplitude envelope, with per-trial phase and gain jitter plus Gaussian noise.
    """
    if n_classes < 2:
        raise ConfigError("n_classes must be >= 2")
    if n_channels < 1 or trials_per_class < 1 or frames < 1:
        raise ConfigError("n_channels, trials_per_class and frames must be positive")
    rng = np.random.default_rng(seed)
    gm = gesture_model(n_classes, n_channels, rng)
    t = np.arange(frames) / sample_rate_hz
    trials = []
    k = 0
    for g in range(n_classes):
        for _ in range(trials_per_class):
            phase = rng.uniform(0, 2 * np.pi, size=gm.freqs.shape[1:])
            env_phase = rng.uniform(0, 2 * np.pi, size=n_channels)
            gain = rng.uniform(0.9, 1.1, size=n_channels)
            carrier = np.sin(2 * np.pi * gm.freqs[g][None] * t[:, None, None] + phase[None]).sum(axis=2)
            carrier /= np.sqrt(gm.freqs.shape[2] / 2.0)
            env = 1.0 + gm.env_depth[g] * np.sin(2 * np.pi * gm.env_freq[g] * t[:, None] + env_phase)
            x = gm.amplitude[g] * gain * env * carrier
            x += noise_sigma * rng.standard_normal(x.shape)
            trials.append(Trial(x, sample_rate_hz, g, subject, session, k))
            k += 1
    return trials


# --------------------------------------------------------------------- shifts

SHIFT_KINDS = ("none", "affine", "nonlinear")
MIXINGS = ("displacement", "dense", "gain")
DEFAULT_MIXING = {"none": "gain", "affine": "displacement", "nonlinear": "gain"}
# a raw offset swamps low-amplitude channels once the warp has compressed them
DEFAULT_OFFSET_SCALE = {"none": 0.0, "affine": 0.1, "nonlinear": 0.0}


@dataclass
class ShiftSpec:
    """Covariate shift applied to raw samples.

    ``mixing="displacement"`` draws A as an electrode-ring displacement: a
    circular channel shift interpolated between neighbours, followed by
    per-channel gains. ``"gain"`` keeps only the per-channel gains, and
    ``"dense"`` draws A from random orthogonal factors with log-spaced singular
    values. Left as ``None``, mixing and offset scale follow the kind:
    displacement with offsets for ``affine``, gains only for ``nonlinear``.
    ``matrix``/``offset`` override the seeded draw.

    The nonlinear kind warps every raw channel with ``sign(x) |x|^gamma``
    before the affine map.
    """

    kind: str = "affine"
    seed: int = 0
    gamma: float = 4.0
    noise_sigma: float = 0.0
    condition_target: float = 3.0
    offset_scale: Optional[float] = None
    mixing: Optional[str] = None
    matrix: Optional[np.ndarray] = field(default=None, repr=False)
    offset: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise SpecError(f"shift kind must be one of {SHIFT_KINDS}, got {self.kind!r}")
        if self.kind == "nonlinear" and not self.gamma > 0:
            raise SpecError("gamma must be positive")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be non-negative")
        if not 1.0 <= self.condition_target < 1e6:
            raise SpecError("condition_target must lie in [1, 1e6)")
        if self.offset_scale is None:
            self.offset_scale = DEFAULT_OFFSET_SCALE[self.kind]
        if self.offset_scale < 0:
            raise SpecError("offset_scale must be non-negative")
        if self.mixing is None:
            self.mixing = DEFAULT_MIXING[self.kind]
        if self.mixing not in MIXINGS:
            raise SpecError(f"mixing must be one of {MIXINGS}, got {self.mixing!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "gamma": self.gamma,
            "noise_sigma": self.noise_sigma,
            "condition_target": self.condition_target,
            "offset_scale": self.offset_scale,
            "mixing": self.mixing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        known = {"kind", "seed", "gamma", "noise_sigma", "condition_target", "offset_scale", "mixing"}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown ShiftSpec fields: {sorted(unknown)}")
        return cls(**d)


def _random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _displacement(rng: np.random.Generator, n: int, condition_target: float) -> np.ndarray:
    # channel i now records (1 - a) * x[i + k] + a * x[i + k + 1]
    k = int(rng.integers(1, n)) if n > 1 else 0
    frac = rng.uniform(0.15, 0.35)
    S = np.zeros((n, n))
    for i in range(n):
        S[i, (i + k) % n] += 1.0 - frac
        S[i, (i + k + 1) % n] += frac
    return _gains(rng, n, condition_target)[:, None] * S


def _gains(rng: np.random.Generator, n: int, condition_target: float) -> np.ndarray:
    # spread so that cond(diag) = condition_target, geometric mean 1
    half = 0.5 * np.log(condition_target)
    return np.exp(rng.permutation(np.linspace(-half, half, n)))


def shift_parameters(spec: ShiftSpec, n_channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Mixing matrix A and offset c for a spec (seeded unless given explicitly)."""
    rng = np.random.default_rng(spec.seed)
    if spec.matrix is not None:
        A = np.asarray(spec.matrix, dtype=np.float64)
    elif spec.mixing == "dense":
        # singular values log-spaced in [1, cond], rescaled to unit geometric mean
        s = np.geomspace(1.0, spec.condition_target, n_channels)
        s /= np.exp(np.log(s).mean())
        A = _random_orthogonal(rng, n_channels) @ np.diag(s) @ _random_orthogonal(rng, n_channels).T
    elif spec.mixing == "gain":
        A = np.diag(_gains(rng, n_channels, spec.condition_target))
    else:
        A = _displacement(rng, n_channels, spec.condition_target)
    if A.shape != (n_channels, n_channels):
        raise SpecError(f"mixing matrix must be {n_channels}x{n_channels}, got {A.shape}")
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) >= 1e6:
        raise SpecError("mixing matrix is not invertible (condition number >= 1e6)")
    if spec.offset is not None:
        c = np.asarray(spec.offset, dtype=np.float64).reshape(n_channels)
    else:
        c = spec.offset_scale * rng.standard_normal(n_channels)
    return A, c


def apply_shift(trials: Sequence[Trial], spec: ShiftSpec) -> list[Trial]:
    """Transform raw samples; labels and metadata are untouched."""
    if spec.kind == "none" or not trials:
        return [tr.replace(tr.samples.copy()) for tr in trials]
    A, c = shift_parameters(spec, trials[0].n_channels)
    noise_rng = np.random.default_rng([spec.seed, 1])
    out = []
    for tr in trials:
        x = tr.samples
        if spec.kind == "nonlinear":
            x = np.sign(x) * np.abs(x) ** spec.gamma
        x = x @ A.T + c
        if spec.noise_sigma > 0:
            x = x + spec.noise_sigma * noise_rng.standard_normal(x.shape)
        out.append(tr.replace(x))
    return out
