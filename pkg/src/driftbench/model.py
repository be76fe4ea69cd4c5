"""Stacked-LSTM many-to-one classifier and the per-timestep input adapters.

Gate pre-activations act on the concatenation ``[h_{t-1}, x_t]``; every gate
matrix is laid out ``(hidden + input) x hidden`` so the first ``hidden`` rows
multiply the previous hidden state.

Adapters are square ``f x f`` transforms applied to every input frame before
the first LSTM layer:

    linear:  x' = M x + b
    deep:    x' = relu(M2 relu(M1 x + b1) + b2)

An identity-initialized deep adapter is the identity only on non-negative
inputs. Preprocessed windows are rectified, so this always holds inside the
pipeline.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, DataError, ParseError, ShapeError
from .tensor import Tensor

GATES = ("f", "i", "C", "o")
ADAPTER_KINDS = ("linear", "deep")
STAGES = ("untrained", "source-trained")


@dataclass
class LstmLayerParams:
    W_f: Tensor
    W_i: Tensor
    W_C: Tensor
    W_o: Tensor
    b_f: Tensor
    b_i: Tensor
    b_C: Tensor
    b_o: Tensor

    def __post_init__(self):
        shapes = {self.W_f.shape, self.W_i.shape, self.W_C.shape, self.W_o.shape}
        if len(shapes) != 1:
            raise ShapeError(f"gate weight matrices differ in shape: {sorted(shapes)}")
        rows, hidden = self.W_f.shape
        if rows <= hidden:
            raise ShapeError("gate weights must be (input + hidden) x hidden")
        for b in (self.b_f, self.b_i, self.b_C, self.b_o):
            if b.shape != (hidden,):
                raise ShapeError(f"gate bias must have shape ({hidden},), got {b.shape}")

    @property
    def hidden_size(self) -> int:
        return self.W_f.shape[1]

    @property
    def input_size(self) -> int:
        return self.W_f.shape[0] - self.hidden_size

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(f"W_{g}", getattr(self, f"W_{g}")) for g in GATES] + [
            (f"b_{g}", getattr(self, f"b_{g}")) for g in GATES
        ]


@dataclass
class ClassifierParams:
    layers: list[LstmLayerParams]
    fc_W: Tensor
    fc_b: Tensor
    out_W: Tensor
    out_b: Tensor
    stage: str = "untrained"

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("classifier needs at least one LSTM layer")
        for prev, layer in zip(self.layers, self.layers[1:]):
            if layer.input_size != prev.hidden_size:
                raise ShapeError("layer input size must equal the previous layer's hidden size")
        if self.fc_W.shape[0] != self.layers[-1].hidden_size:
            raise ShapeError("fc_W rows must equal the top layer's hidden size")
        if self.out_W.shape[0] != self.fc_W.shape[1]:
            raise ShapeError("out_W rows must equal fc_units")
        if self.n_classes < 2:
            raise ShapeError("classifier needs G >= 2 classes")
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")

    @property
    def n_channels(self) -> int:
        return self.layers[0].input_size

    @property
    def n_classes(self) -> int:
        return self.out_W.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.layers[0].hidden_size

    @property
    def fc_units(self) -> int:
        return self.fc_W.shape[1]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for k, layer in enumerate(self.layers):
            out += [(f"lstm{k}.{name}", t) for name, t in layer.named_tensors()]
        out += [("fc_W", self.fc_W), ("fc_b", self.fc_b), ("out_W", self.out_W), ("out_b", self.out_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]


@dataclass
class AdapterParams:
    kind: str
    M: Optional[Tensor] = None
    b: Optional[Tensor] = None
    M1: Optional[Tensor] = None
    b1: Optional[Tensor] = None
    M2: Optional[Tensor] = None
    b2: Optional[Tensor] = None

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"adapter kind must be one of {ADAPTER_KINDS}, got {self.kind!r}")
        named = self.named_tensors()
        if any(t is None for _, t in named):
            raise ConfigError(f"{self.kind} adapter is missing weights")
        f = named[0][1].shape[0]
        for name, t in named:
            want = (f, f) if name.startswith("M") else (f,)
            if t.shape != want:
                raise ShapeError(f"adapter {name} must have shape {want}, got {t.shape}")

    @property
    def n_channels(self) -> int:
        return self.named_tensors()[0][1].shape[0]

    def named_tensors(self) -> list[tuple[str, Optional[Tensor]]]:
        if self.kind == "linear":
            return [("M", self.M), ("b", self.b)]
        return [("M1", self.M1), ("b1", self.b1), ("M2", self.M2), ("b2", self.b2)]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]


class CellState(NamedTuple):
    h: Tensor
    C: Tensor


@dataclass
class ModelConfig:
    """Architecture dimensions. Defaults follow the reference setup."""

    n_channels: int = 128
    n_classes: int = 8
    hidden_size: int = 512
    depth: int = 2
    fc_units: int = 512

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if min(self.n_channels, self.hidden_size, self.depth, self.fc_units) < 1:
            raise ConfigError("model dimensions must be positive")


# ------------------------------------------------------------------ factories


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape: tuple) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_classifier(cfg: ModelConfig, rng: np.random.Generator) -> ClassifierParams:
    layers = []
    in_size = cfg.n_channels
    H = cfg.hidden_size
    for _ in range(cfg.depth):
        fan_in = in_size + H
        gates = {f"W_{g}": _uniform(rng, fan_in, (fan_in, H)) for g in GATES}
        biases = {f"b_{g}": _zeros((H,)) for g in GATES}
        biases["b_f"].data[:] = 1.0
        layers.append(LstmLayerParams(**gates, **biases))
        in_size = H
    return ClassifierParams(
        layers=layers,
        fc_W=_uniform(rng, H, (H, cfg.fc_units)),
        fc_b=_zeros((cfg.fc_units,)),
        out_W=_uniform(rng, cfg.fc_units, (cfg.fc_units, cfg.n_classes)),
        out_b=_zeros((cfg.n_classes,)),
    )


def zero_classifier(cfg: ModelConfig) -> ClassifierParams:
    """All weights and biases zero (including the forget bias)."""
    clf = init_classifier(cfg, np.random.default_rng(0))
    for t in clf.parameters():
        t.data[...] = 0.0
    return clf


def identity_adapter(kind: str, n_channels: int) -> AdapterParams:
    eye = lambda: Tensor(np.eye(n_channels), requires_grad=True)  # noqa: E731
    if kind == "linear":
        return AdapterParams("linear", M=eye(), b=_zeros((n_channels,)))
    if kind == "deep":
        return AdapterParams("deep", M1=eye(), b1=_zeros((n_channels,)), M2=eye(), b2=_zeros((n_channels,)))
    raise ConfigError(f"adapter kind must be one of {ADAPTER_KINDS}, got {kind!r}")


def set_trainable(params, flag: bool) -> None:
    """Freeze (``False``) or unfreeze every tensor of a classifier/adapter."""
    for t in params.parameters():
        t.requires_grad = flag
        t.grad = np.zeros_like(t.data) if flag else None


def param_count(params) -> int:
    return int(sum(t.size for t in params.parameters()))


def adapter_fraction(classifier: ClassifierParams, adapter: AdapterParams) -> float:
    n_adapter = param_count(adapter)
    return n_adapter / (n_adapter + param_count(classifier))


# -------------------------------------------------------------------- forward


def _stacked(layer: LstmLayerParams) -> tuple[Tensor, Tensor]:
    W = tn.concat([layer.W_f, layer.W_i, layer.W_C, layer.W_o], axis=1)
    b = tn.concat([layer.b_f, layer.b_i, layer.b_C, layer.b_o], axis=0)
    return W, b


def _cell(W: Tensor, b: Tensor, H: int, x_t: Tensor, state: CellState) -> CellState:
    hc = tn.lstm_cell(W, b, x_t, state.h, state.C)
    return CellState(hc[..., :H], hc[..., H:])


def zero_state(hidden_size: int, batch: Optional[int] = None) -> CellState:
    shape = (hidden_size,) if batch is None else (batch, hidden_size)
    return CellState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def lstm_cell_step(params: LstmLayerParams, x_t, state: CellState) -> tuple[Tensor, CellState]:
    """One LSTM step. ``x_t`` is ``[input]`` or a batch ``[B, input]``."""
    x_t = tn.as_tensor(x_t)
    if x_t.shape[-1] != params.input_size:
        raise ShapeError(f"x_t has {x_t.shape[-1]} features, layer expects {params.input_size}")
    W, b = _stacked(params)
    new = _cell(W, b, params.hidden_size, x_t, state)
    return new.h, new


def adapt(adapter: AdapterParams, x) -> Tensor:
    """Apply the adapter to frames ``[f]`` or ``[N, f]``."""
    x = tn.as_tensor(x)
    if x.shape[-1] != adapter.n_channels:
        raise ShapeError(f"adapter expects {adapter.n_channels} channels, got {x.shape[-1]}")
    if adapter.kind == "linear":
        return x @ adapter.M.T + adapter.b
    hidden = tn.relu(x @ adapter.M1.T + adapter.b1)
    return tn.relu(hidden @ adapter.M2.T + adapter.b2)


def forward(
    params: ClassifierParams,
    adapter: Optional[AdapterParams],
    windows,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    dropout_p: float = 0.0,
) -> Tensor:
    """Logits ``[B, G]`` for a batch of windows ``[B, T, f]``."""
    X = np.asarray(windows, dtype=np.float64)
    if X.ndim != 3:
        raise ShapeError(f"windows must be [B, T, f], got shape {X.shape}")
    B, T, C = X.shape
    if T == 0:
        raise DataError("empty window (T = 0)")
    if C != params.n_channels:
        raise ShapeError(f"window has {C} channels, classifier expects {params.n_channels}")

    x = Tensor._wrap(X, False)
    if adapter is not None:
        x = adapt(adapter, x.reshape(B * T, C)).reshape(B, T, C)
    seq = [x[:, t, :] for t in range(T)]

    n_layers = params.depth
    for k, layer in enumerate(params.layers):
        W, b = _stacked(layer)
        state = zero_state(layer.hidden_size, B)
        outputs = []
        for x_t in seq:
            state = _cell(W, b, layer.hidden_size, x_t, state)
            # only the final top-layer output reaches the head
            if k < n_layers - 1:
                outputs.append(tn.dropout(state.h, dropout_p, mode, rng))
        seq = outputs
    top = tn.dropout(state.h, dropout_p, mode, rng)
    fc = tn.dropout(tn.relu(top @ params.fc_W + params.fc_b), dropout_p, mode, rng)
    return fc @ params.out_W + params.out_b


def classify_window(
    params: ClassifierParams,
    adapter: Optional[AdapterParams],
    window,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    dropout_p: float = 0.0,
) -> Tensor:
    """Pre-softmax logits ``[G]`` for one ``T x f`` window."""
    data = getattr(window, "data", window)
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"window must be T x f, got shape {X.shape}")
    if X.shape[0] == 0:
        raise DataError("empty window (T = 0)")
    return forward(params, adapter, X[None], mode=mode, rng=rng, dropout_p=dropout_p)[0]


def thread_cap() -> int:
    raw = os.environ.get("DRIFTBENCH_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DRIFTBENCH_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def predict_logits(
    params: ClassifierParams,
    adapter: Optional[AdapterParams],
    X: np.ndarray,
    batch_size: int = 256,
    workers: Optional[int] = None,
) -> np.ndarray:
    """Eval-mode logits for ``X [N, T, f]``, in input order."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or len(X) == 0:
        raise DataError("need a non-empty [N, T, f] array of windows")
    chunks = [X[s:s + batch_size] for s in range(0, len(X), batch_size)]

    def run(chunk):
        with tn.no_grad():
            return forward(params, adapter, chunk, mode="eval").data

    workers = thread_cap() if workers is None else workers
    if workers <= 1 or len(chunks) == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    return np.concatenate(parts, axis=0)


def window_losses(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-window cross-entropy (nats) from precomputed logits."""
    with tn.no_grad():
        return tn.softmax_cross_entropy(Tensor._wrap(np.asarray(logits, dtype=np.float64), False),
                                        np.asarray(labels)).data


# ----------------------------------------------------------------- checkpoint
#
# Layout:  b"DBCKPT01" | uint32 LE header length | UTF-8 JSON header | blob
# The blob holds every tensor listed in header["tensors"], in that order,
# as row-major little-endian float64.
#   classifier order: lstm0.W_f, W_i, W_C, W_o, b_f, b_i, b_C, b_o, lstm1.W_f, ...,
#                     fc_W, fc_b, out_W, out_b
#   adapter order:    linear M, b | deep M1, b1, M2, b2

MAGIC = b"DBCKPT01"


def _encode(header: dict, named: list[tuple[str, Tensor]]) -> bytes:
    header = dict(header, tensors=[[name, list(t.shape)] for name, t in named])
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in named)
    return MAGIC + struct.pack("<I", len(head)) + head + blob


def _decode(raw: bytes, source: str) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:8] != MAGIC or len(raw) < 12:
        raise ParseError(f"{source}: not a driftbench checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{source}: corrupt checkpoint header ({exc})") from None
    offset = 12 + n
    arrays = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ParseError(f"{source}: truncated parameter blob at {name}")
        arrays[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise ParseError(f"{source}: trailing bytes after parameter blob")
    return header, arrays


def classifier_bytes(params: ClassifierParams, seed: int, extra: Optional[dict] = None) -> bytes:
    header = {
        "format": 1,
        "kind": "classifier",
        "n_channels": params.n_channels,
        "n_classes": params.n_classes,
        "hidden_size": params.hidden_size,
        "depth": params.depth,
        "fc_units": params.fc_units,
        "adapter_kind": None,
        "seed": int(seed),
        "stage": params.stage,
        "extra": extra or {},
    }
    return _encode(header, params.named_tensors())


def adapter_bytes(adapter: AdapterParams, seed: int, extra: Optional[dict] = None) -> bytes:
    header = {
        "format": 1,
        "kind": "adapter",
        "n_channels": adapter.n_channels,
        "adapter_kind": adapter.kind,
        "seed": int(seed),
        "stage": "adapted",
        "extra": extra or {},
    }
    return _encode(header, adapter.named_tensors())


def save_checkpoint(path, params, seed: int, extra: Optional[dict] = None) -> None:
    raw = (adapter_bytes if isinstance(params, AdapterParams) else classifier_bytes)(params, seed, extra)
    with open(path, "wb") as fh:
        fh.write(raw)


def load_checkpoint(path):
    """Return ``(params, header)``; params is a classifier or an adapter."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    header, arrays = _decode(raw, str(path))
    tensors = {name: Tensor(a, requires_grad=True) for name, a in arrays.items()}
    if header["kind"] == "adapter":
        return AdapterParams(header["adapter_kind"], **tensors), header
    layers = []
    for k in range(header["depth"]):
        prefix = f"lstm{k}."
        layers.append(LstmLayerParams(**{n[len(prefix):]: t for n, t in tensors.items() if n.startswith(prefix)}))
    clf = ClassifierParams(
        layers=layers,
        fc_W=tensors["fc_W"],
        fc_b=tensors["fc_b"],
        out_W=tensors["out_W"],
        out_b=tensors["out_b"],
        stage=header["stage"],
    )
    return clf, header


def snapshot(params) -> list[np.ndarray]:
    return [t.data.copy() for t in params.parameters()]


def restore(params, saved: list[np.ndarray]) -> None:
    for t, a in zip(params.parameters(), saved):
        t.data[...] = a


def require_trained(params: ClassifierParams) -> None:
    if params.stage != "source-trained":
        raise ContractError("classifier has not completed stage-I source training")
