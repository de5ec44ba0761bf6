"""Stacked-LSTM outcome classifier over fused per-frame features.

Per frame the network sees ``phi = psi ++ c_a(rho) ++ c_v(xi)``, where
``c_a`` and ``c_v`` are learned affine compressions of the raw affect and
identity embeddings. The fused sequence runs through ``num_layers`` stacked
LSTM layers; the head reads the top layer's final hidden state (or the
time-mean with ``pooling="mean"``) and emits softmax class probabilities.

Two gradient engines are available and must agree:

* ``"fused"`` -- whole-sequence forward/backward built on
  :mod:`atlbp.kernels` (numba or numpy), used for training.
* ``"tape"`` -- per-frame graph on :class:`atlbp.numgrad.GradTape`,
  used as the reference path.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import kernels
from . import numgrad as ng
from .errors import ConfigError, DataError, NumericDomainError, UsageError

log = logging.getLogger(__name__)

EMBEDDING_MODES = ("none", "affect_only", "identity_only", "both")
CHECKPOINT_VERSION = 1


class PersonalizationWarning(UserWarning):
    pass


@dataclass
class ModelConfig:
    dim_psi: int = 49
    dim_rho: int = 8192
    dim_xi: int = 2622
    dim_ca: int | None = None
    dim_cv: int | None = None
    hidden_units: int = 200
    num_classes: int = 7
    num_layers: int = 2
    learning_rate: float = 3e-5
    epochs: int = 30
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = None
    seed: int = 0
    embedding_mode: str = "both"
    compress_activation: str = "none"
    pooling: str = "last"
    engine: str = "fused"

    def __post_init__(self):
        if self.embedding_mode not in EMBEDDING_MODES:
            raise ConfigError(f"embedding_mode must be one of {EMBEDDING_MODES}, got {self.embedding_mode!r}")
        # a single embedding takes the whole 100-d compressed budget
        if self.dim_ca is None:
            self.dim_ca = 100 if self.embedding_mode == "affect_only" else 50
        if self.dim_cv is None:
            self.dim_cv = 100 if self.embedding_mode == "identity_only" else 50
        for name in ("dim_psi", "dim_rho", "dim_xi", "dim_ca", "dim_cv", "hidden_units", "num_classes", "num_layers"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
            setattr(self, name, int(getattr(self, name)))
        if self.batch_size != 1:
            raise ConfigError("batch_size is fixed at 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.compress_activation not in ("none", "tanh"):
            raise ConfigError("compress_activation must be 'none' or 'tanh'")
        if self.pooling not in ("last", "mean"):
            raise ConfigError("pooling must be 'last' or 'mean'")
        if self.engine not in ("fused", "tape"):
            raise ConfigError("engine must be 'fused' or 'tape'")

    @property
    def uses_affect(self) -> bool:
        return self.embedding_mode in ("affect_only", "both")

    @property
    def uses_identity(self) -> bool:
        return self.embedding_mode in ("identity_only", "both")

    @property
    def fused_dim(self) -> int:
        return self.dim_psi + self.dim_ca * self.uses_affect + self.dim_cv * self.uses_identity

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        if "embedding_mode" in changes:
            # let the compressed sizes re-resolve for the new mode
            d["dim_ca"] = d["dim_cv"] = None
        d.update(changes)
        return ModelConfig(**d)


def param_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    H, C = config.hidden_units, config.num_classes
    layout = []
    if config.uses_affect:
        layout += [("ca.W", (config.dim_ca, config.dim_rho)), ("ca.b", (config.dim_ca,))]
    if config.uses_identity:
        layout += [("cv.W", (config.dim_cv, config.dim_xi)), ("cv.b", (config.dim_cv,))]
    din = config.fused_dim
    for l in range(1, config.num_layers + 1):
        layout += [(f"lstm{l}.W", (4 * H, din)), (f"lstm{l}.U", (4 * H, H)), (f"lstm{l}.b", (4 * H,))]
        din = H
    layout += [("head.W", (C, H)), ("head.b", (C,))]
    return layout


def param_count(config: ModelConfig) -> int:
    """Closed-form number of trainable scalars."""
    H, C, D = config.hidden_units, config.num_classes, config.fused_dim
    n = 0
    if config.uses_affect:
        n += config.dim_ca * (config.dim_rho + 1)
    if config.uses_identity:
        n += config.dim_cv * (config.dim_xi + 1)
    n += 4 * H * (D + H + 1)
    n += (config.num_layers - 1) * 4 * H * (2 * H + 1)
    n += C * (H + 1)
    return n


class ModelParams:
    """All trainable tensors, stored as views into one flat float64 buffer."""

    def __init__(self, config: ModelConfig, flat: np.ndarray | None = None):
        self.config = config
        self.layout = param_layout(config)
        total = sum(math.prod(s) for _, s in self.layout)
        if flat is None:
            flat = np.zeros(total)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (total,):
            raise ConfigError(f"flat buffer has {flat.size} entries, layout needs {total}")
        self.flat = flat
        self._views = {}
        off = 0
        for name, shape in self.layout:
            size = math.prod(shape)
            self._views[name] = flat[off:off + size].reshape(shape)
            off += size

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __contains__(self, name: str) -> bool:
        return name in self._views

    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self._views)

    def copy(self) -> "ModelParams":
        return ModelParams(copy.deepcopy(self.config), self.flat.copy())

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config)

    def __eq__(self, other):
        return (
            isinstance(other, ModelParams)
            and self.config == other.config
            and np.array_equal(self.flat, other.flat)
        )

    def to_json_dict(self) -> dict:
        return {
            name: {"shape": list(shape), "values": self[name].ravel().tolist()}
            for name, shape in self.layout
        }

    @classmethod
    def from_json_dict(cls, config: ModelConfig, d: dict) -> "ModelParams":
        params = cls(config)
        for name, shape in params.layout:
            if name not in d:
                raise DataError(f"checkpoint is missing tensor {name!r}")
            entry = d[name]
            if tuple(entry["shape"]) != shape:
                raise DataError(f"tensor {name!r}: shape {entry['shape']} != expected {list(shape)}")
            params[name][...] = np.asarray(entry["values"], dtype=np.float64).reshape(shape)
        return params


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(-k, k) weights with k = 1/sqrt(fan_in); forget-gate bias 1."""
    params = ModelParams(config)
    H = config.hidden_units
    for name, shape in params.layout:
        if name.endswith(".b"):
            if name.startswith("lstm"):
                params[name][H:2 * H] = 1.0
            continue
        k = 1.0 / math.sqrt(shape[1])
        params[name][...] = rng.uniform(-k, k, size=shape)
    return params


# --------------------------------------------------------------------------
# single-frame building blocks (work on arrays and on tape Vars)

def compress_embeddings(params: ModelParams, rho=None, xi=None, *, tape_vars=None):
    """Apply the learned compressions. Returns ``(ca, cv)``; unused ones are None."""
    cfg = params.config
    get = (lambda n: tape_vars[n]) if tape_vars is not None else params.__getitem__
    ca = cv = None
    if cfg.uses_affect:
        if rho is None:
            raise DataError("affect embedding required by embedding_mode but missing")
        ca = ng.apply_affine(get("ca.W"), get("ca.b"), rho)
        if cfg.compress_activation == "tanh":
            ca = ng.tanh(ca)
    if cfg.uses_identity:
        if xi is None:
            raise DataError("identity embedding required by embedding_mode but missing")
        cv = ng.apply_affine(get("cv.W"), get("cv.b"), xi)
        if cfg.compress_activation == "tanh":
            cv = ng.tanh(cv)
    return ca, cv


def fuse_features(psi, ca=None, cv=None):
    """Concatenate ``psi``, then ``ca``, then ``cv``, skipping absent parts."""
    parts = [p for p in (psi, ca, cv) if p is not None]
    if len(parts) == 1:
        return parts[0]
    return ng.concat(*parts)


def lstm_cell_step(W, U, b, x, h, c, t: int | None = None):
    """One LSTM step: gates i, f, o sigmoid; candidate g tanh.

    ``c' = f*c + i*g`` and ``h' = o*tanh(c')``. Arguments may be arrays or
    tape Vars.
    """
    for what, v in (("hidden", h), ("cell", c)):
        if not np.all(np.isfinite(ng._val(v))):
            where = "" if t is None else f" at timestep {t}"
            raise NumericDomainError(f"non-finite {what} state{where}")
    H = np.shape(ng._val(U))[1]
    a = ng.add(ng.apply_affine(W, b, x), ng.apply_affine(U, None, h))
    i = ng.sigmoid(ng.take(a, 0, H))
    f = ng.sigmoid(ng.take(a, H, 2 * H))
    g = ng.tanh(ng.take(a, 2 * H, 3 * H))
    o = ng.sigmoid(ng.take(a, 3 * H, 4 * H))
    c_new = ng.add(ng.mul(f, c), ng.mul(i, g))
    h_new = ng.mul(o, ng.tanh(c_new))
    return h_new, c_new


# --------------------------------------------------------------------------
# sequence inputs

def _segment_arrays(params: ModelParams, segment):
    cfg = params.config
    psi = np.asarray(segment.psi, dtype=np.float64)
    seg_id = getattr(segment, "segment_id", "<segment>")
    if psi.ndim != 2 or psi.shape[0] < 1:
        raise DataError(f"segment {seg_id}: empty frame sequence")
    if psi.shape[1] != cfg.dim_psi:
        raise ConfigError(f"segment {seg_id}: psi has {psi.shape[1]} dims, model expects {cfg.dim_psi}")
    rho = xi = None
    for flag, attr, dim, label in (
        (cfg.uses_affect, "rho", cfg.dim_rho, "affect"),
        (cfg.uses_identity, "xi", cfg.dim_xi, "identity"),
    ):
        if not flag:
            continue
        arr = getattr(segment, attr, None)
        if arr is None:
            raise DataError(f"segment {seg_id}: frame 0 is missing the {label} embedding")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape[1] != dim:
            raise ConfigError(f"segment {seg_id}: {attr} has {arr.shape[1]} dims, model expects {dim}")
        missing = np.flatnonzero(np.isnan(arr[:, 0]))
        if missing.size:
            raise DataError(f"segment {seg_id}: frame {int(missing[0])} is missing the {label} embedding")
        if attr == "rho":
            rho = arr
        else:
            xi = arr
    return psi, rho, xi


# --------------------------------------------------------------------------
# fused engine

def _forward(params: ModelParams, psi, rho, xi):
    cfg = params.config
    H = cfg.hidden_units
    cache = {"psi": psi, "rho": rho, "xi": xi}
    parts = [psi]
    if cfg.uses_affect:
        ca = rho @ params["ca.W"].T + params["ca.b"]
        if cfg.compress_activation == "tanh":
            ca = np.tanh(ca)
        cache["ca"] = ca
        parts.append(ca)
    if cfg.uses_identity:
        cv = xi @ params["cv.W"].T + params["cv.b"]
        if cfg.compress_activation == "tanh":
            cv = np.tanh(cv)
        cache["cv"] = cv
        parts.append(cv)
    x = np.concatenate(parts, axis=1) if len(parts) > 1 else np.ascontiguousarray(psi)
    zeros = np.zeros(H)
    layers = []
    inp = x
    for l in range(1, cfg.num_layers + 1):
        xw = inp @ params[f"lstm{l}.W"].T + params[f"lstm{l}.b"]
        hs, cs, acts = kernels.lstm_forward(xw, params[f"lstm{l}.U"], zeros, zeros)
        if not np.all(np.isfinite(cs)):
            t = int(np.flatnonzero(~np.isfinite(cs).all(axis=1))[0])
            raise NumericDomainError(f"non-finite LSTM state in layer {l} at timestep {t}")
        layers.append((inp, hs, cs, acts))
        inp = hs
    top = inp[-1] if cfg.pooling == "last" else inp.mean(axis=0)
    logits = params["head.W"] @ top + params["head.b"]
    cache.update(layers=layers, top=top)
    return ng.softmax(logits), cache


def _backward(params: ModelParams, probs, cache, label: int) -> ModelParams:
    cfg = params.config
    H = cfg.hidden_units
    grad = params.zeros_like()
    dlogits = probs.copy()
    dlogits[label] -= 1.0
    grad["head.W"][...] = np.outer(dlogits, cache["top"])
    grad["head.b"][...] = dlogits
    dtop = params["head.W"].T @ dlogits
    layers = cache["layers"]
    T = layers[0][1].shape[0]
    dh = np.zeros((T, H))
    if cfg.pooling == "last":
        dh[-1] = dtop
    else:
        dh[:] = dtop / T
    zeros = np.zeros(H)
    for l in range(cfg.num_layers, 0, -1):
        inp, hs, cs, acts = layers[l - 1]
        W = params[f"lstm{l}.W"]
        da, dU = kernels.lstm_backward(dh, hs, cs, acts, params[f"lstm{l}.U"], zeros, zeros)
        grad[f"lstm{l}.W"][...] = da.T @ inp
        grad[f"lstm{l}.U"][...] = dU
        grad[f"lstm{l}.b"][...] = da.sum(axis=0)
        dh = da @ W
    off = cfg.dim_psi
    for flag, key, src, dim in (
        (cfg.uses_affect, "ca", "rho", cfg.dim_ca),
        (cfg.uses_identity, "cv", "xi", cfg.dim_cv),
    ):
        if not flag:
            continue
        d = dh[:, off:off + dim]
        if cfg.compress_activation == "tanh":
            d = d * (1.0 - cache[key] ** 2)
        grad[f"{key}.W"][...] = d.T @ cache[src]
        grad[f"{key}.b"][...] = d.sum(axis=0)
        off += dim
    return grad


def fused_features(params: ModelParams, segment) -> np.ndarray:
    """The ``T x D`` matrix of fused per-frame vectors."""
    psi, rho, xi = _segment_arrays(params, segment)
    cfg = params.config
    rows = []
    for t in range(psi.shape[0]):
        ca, cv = compress_embeddings(
            params, None if rho is None else rho[t], None if xi is None else xi[t]
        )
        rows.append(fuse_features(psi[t], ca, cv))
    out = np.vstack(rows)
    assert out.shape[1] == cfg.fused_dim
    return out


# --------------------------------------------------------------------------
# tape engine

def tape_loss(params: ModelParams, segment, label: int):
    """Record the full forward pass on a fresh tape. Returns ``(tape, loss_var)``."""
    cfg = params.config
    psi, rho, xi = _segment_arrays(params, segment)
    tape = ng.GradTape()
    p = {name: tape.param(name, params[name]) for name in params.names()}
    H = cfg.hidden_units
    T = psi.shape[0]
    inputs = []
    for t in range(T):
        ca, cv = compress_embeddings(
            params, None if rho is None else rho[t], None if xi is None else xi[t], tape_vars=p
        )
        inputs.append(fuse_features(psi[t], ca, cv))
    for l in range(1, cfg.num_layers + 1):
        h = c = np.zeros(H)
        outs = []
        for t, x in enumerate(inputs):
            h, c = lstm_cell_step(p[f"lstm{l}.W"], p[f"lstm{l}.U"], p[f"lstm{l}.b"], x, h, c, t)
            outs.append(h)
        inputs = outs
    if cfg.pooling == "last":
        top = inputs[-1]
    else:
        top = inputs[0]
        for h in inputs[1:]:
            top = ng.add(top, h)
        top = ng.scale(top, 1.0 / T)
    logits = ng.apply_affine(p["head.W"], p["head.b"], top)
    return tape, ng.softmax_cross_entropy(logits, label)


def tape_gradients(params: ModelParams, segment, label: int):
    tape, loss = tape_loss(params, segment, label)
    grads = ng.backward(tape, loss)
    out = params.zeros_like()
    for name, g in grads.items():
        out[name][...] = g
    return float(loss.value), out


# --------------------------------------------------------------------------
# public sequence API

def _check_label(label, C, seg_id="<segment>"):
    if not (isinstance(label, (int, np.integer)) and 0 <= label < C):
        raise DataError(f"segment {seg_id}: label {label!r} outside 0..{C - 1}")


def loss_and_grad(params: ModelParams, segment, label: int | None = None):
    """Cross-entropy loss and its gradient (as a ModelParams) for one segment."""
    label = segment.label if label is None else label
    _check_label(label, params.config.num_classes, getattr(segment, "segment_id", "<segment>"))
    if params.config.engine == "tape":
        loss, grad = tape_gradients(params, segment, int(label))
        return loss, grad
    psi, rho, xi = _segment_arrays(params, segment)
    probs, cache = _forward(params, psi, rho, xi)
    loss = ng.cross_entropy(probs, int(label))
    return loss, _backward(params, probs, cache, int(label))


def segment_loss(params: ModelParams, segment, label: int | None = None) -> float:
    label = segment.label if label is None else label
    return ng.cross_entropy(classify_sequence(params, segment), int(label))


def classify_sequence(params: ModelParams, segment) -> np.ndarray:
    """Class probabilities for one segment."""
    psi, rho, xi = _segment_arrays(params, segment)
    probs, _ = _forward(params, psi, rho, xi)
    return probs


def decide(probs) -> int:
    """Most probable class; ties go to the lowest index."""
    return int(np.argmax(probs))


def predict(params: ModelParams, segment) -> tuple[int, np.ndarray]:
    """``(label, probabilities)`` for one segment."""
    probs = classify_sequence(params, segment)
    return decide(probs), probs


# --------------------------------------------------------------------------
# training

def _fit(params: ModelParams, segments, epochs: int, rng: np.random.Generator) -> tuple[list[float], int]:
    cfg = params.config
    state = ng.AdamState.for_params(
        {"flat": params.flat}, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps
    )
    theta = {"flat": params.flat}
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(segments))
        total = 0.0
        for j in order:
            loss, grad = loss_and_grad(params, segments[j])
            ng.adam_step(state, theta, {"flat": grad.flat}, clip_norm=cfg.clip_norm)
            total += loss
        trace.append(total / len(segments))
        log.debug("epoch %d mean loss %.6f", epoch + 1, trace[-1])
    return trace, state.t


@dataclass
class TrainResult:
    params: ModelParams
    losses: list
    steps: int


def train(config: ModelConfig, segments, params: ModelParams | None = None) -> TrainResult:
    """Train with Adam, one step per segment, reshuffling every epoch."""
    segments = list(segments)
    if not segments:
        raise UsageError("empty training set")
    for s in segments:
        _check_label(s.label, config.num_classes, getattr(s, "segment_id", "<segment>"))
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(config, rng)
    trace, steps = _fit(params, segments, config.epochs, rng)
    return TrainResult(params, trace, steps)


def personalize(base: ModelParams, config: ModelConfig, segments) -> ModelParams:
    """Fine-tune a copy of ``base`` on one user's earliest segments."""
    segments = list(segments)
    tuned = base.copy()
    if not segments:
        warnings.warn("empty personalization set; returning base parameters", PersonalizationWarning)
        return tuned
    tuned.config = copy.deepcopy(config)
    if param_layout(config) != base.layout:
        raise ConfigError("personalization config does not match the base model layout")
    rng = np.random.default_rng(config.seed)
    _fit(tuned, segments, config.epochs, rng)
    return tuned


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: ModelParams, **extra) -> dict:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "params": params.to_json_dict(),
    }
    doc.update(extra)
    Path(path).write_text(json.dumps(doc))
    return doc


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format_version {doc.get('format_version')!r}")
    config = ModelConfig.from_dict(doc["config"])
    params = ModelParams.from_json_dict(config, doc["params"])
    extra = {k: v for k, v in doc.items() if k not in ("format_version", "config", "params")}
    return params, extra
