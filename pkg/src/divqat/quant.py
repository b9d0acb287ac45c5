"""Simulated quantization: observers, qparams, fake-quant nodes, PTQ and QAT preparation."""
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import CalibrationError, ConfigError
from .nn import Conv2d, Dense, Flatten
from .tensor import Tensor, no_grad

PER_CHANNEL_SYMMETRIC = "per_channel_symmetric"
PER_TENSOR_AFFINE = "per_tensor_affine"
PER_TENSOR_SYMMETRIC = "per_tensor_symmetric"
SCHEMES = (PER_CHANNEL_SYMMETRIC, PER_TENSOR_AFFINE, PER_TENSOR_SYMMETRIC)
PROFILE_WEIGHT_SCHEME = {"server": PER_CHANNEL_SYMMETRIC, "mobile": PER_TENSOR_AFFINE}

_surrogate = False


@contextmanager
def ste_surrogate():
    """Make every fake-quant node output the clamp its gradient rule assumes.

    Only meant for finite-difference verification of the straight-through path.
    """
    global _surrogate
    prev = _surrogate
    _surrogate = True
    try:
        yield
    finally:
        _surrogate = prev


@dataclass
class QuantSpec:
    bit_width: int = 8
    profile: str = "server"
    weight_scheme: str = ""
    activation_scheme: str = PER_TENSOR_AFFINE
    observer: str = "minmax"
    observer_momentum: float = 0.1
    warmup_fraction: float = 0.2

    def __post_init__(self):
        if not 2 <= self.bit_width <= 8:
            raise ConfigError(f"bit_width must be in [2, 8], got {self.bit_width}")
        if self.profile not in PROFILE_WEIGHT_SCHEME:
            raise ConfigError(f"profile must be server or mobile, got {self.profile!r}")
        expected = PROFILE_WEIGHT_SCHEME[self.profile]
        if not self.weight_scheme:
            self.weight_scheme = expected
        elif self.weight_scheme != expected:
            raise ConfigError(f"profile {self.profile} requires weight_scheme {expected}")
        if self.activation_scheme != PER_TENSOR_AFFINE:
            raise ConfigError("activations are always per_tensor_affine")
        if self.observer not in ("minmax", "moving_average"):
            raise ConfigError(f"unknown observer mode {self.observer!r}")
        if not 0 <= self.warmup_fraction <= 1:
            raise ConfigError("warmup_fraction must lie in [0, 1]")

    def qrange(self):
        return -(2 ** (self.bit_width - 1)), 2 ** (self.bit_width - 1) - 1

    def to_dict(self):
        return asdict(self)


@dataclass
class FakeQuantState:
    scale: np.ndarray
    zero_point: np.ndarray
    qmin: int
    qmax: int
    axis: int = None

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float32)
        self.zero_point = np.asarray(self.zero_point, dtype=np.int32)
        if np.any(self.scale <= 0):
            raise ConfigError("scale must be positive")
        if np.any(self.zero_point < self.qmin) or np.any(self.zero_point > self.qmax):
            raise ConfigError("zero_point outside the representable range")


class Observer:
    """Running range tracker, optionally per channel along ``axis``."""

    def __init__(self, mode="minmax", momentum=0.1, axis=None):
        if mode not in ("minmax", "moving_average"):
            raise ConfigError(f"unknown observer mode {mode!r}")
        self.mode = mode
        self.momentum = momentum
        self.axis = axis
        self.min = None
        self.max = None

    @property
    def initialized(self):
        return self.min is not None

    def reset(self):
        self.min = self.max = None

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.axis is None:
            lo, hi = np.asarray(x.min()), np.asarray(x.max())
        else:
            axes = tuple(a for a in range(x.ndim) if a != self.axis)
            lo, hi = x.min(axis=axes), x.max(axis=axes)
        if self.min is None:
            self.min, self.max = lo, hi
        elif self.mode == "minmax":
            self.min, self.max = np.minimum(self.min, lo), np.maximum(self.max, hi)
        else:
            m = self.momentum
            self.min = (1 - m) * self.min + m * lo
            self.max = (1 - m) * self.max + m * hi


def _scheme_for(spec, role):
    return spec.weight_scheme if role == "weight" else spec.activation_scheme


def compute_qparams(observer, spec, role="activation", qrange=None):
    """Scale and zero point covering the observed range (always widened to include 0)."""
    if not observer.initialized:
        raise CalibrationError("observer has not seen any data")
    qmin, qmax = qrange if qrange is not None else spec.qrange()
    lo = np.minimum(observer.min, 0.0)
    hi = np.maximum(observer.max, 0.0)
    if np.any(hi < lo):
        raise CalibrationError("observer max below min")
    scheme = _scheme_for(spec, role)
    if scheme in (PER_CHANNEL_SYMMETRIC, PER_TENSOR_SYMMETRIC):
        amax = np.maximum(np.abs(lo), np.abs(hi))
        scale = np.where(amax > 0, amax / qmax, 1.0)
        zp = np.zeros_like(scale)
    else:
        span = hi - lo
        degenerate = span <= 0
        scale = np.where(degenerate, 1.0, span / (qmax - qmin))
        zp = np.where(degenerate, 0.0, np.clip(np.round(qmin - lo / np.where(degenerate, 1.0, scale)), qmin, qmax))
    scale = np.maximum(scale.astype(np.float32), np.finfo(np.float32).tiny)
    return FakeQuantState(scale, zp.astype(np.int32), qmin, qmax, observer.axis)


def fake_quantize(x, state):
    """Round-to-grid, clamp and dequantize. Arrays in, arrays out; Tensors keep their graph."""
    wrap = isinstance(x, Tensor)
    t = x if wrap else Tensor(x)
    out = T.fake_quant(t, state.scale, state.zero_point, state.qmin, state.qmax, state.axis, _surrogate)
    return out if wrap else out.data


class FakeQuant:
    """A fake-quant node attached to a weight or to a layer's output.

    Observers update only on training-mode forwards with ``observe`` set.
    Weight nodes re-read the current weight range on each update; activation
    nodes accumulate per their observer mode.
    """

    def __init__(self, spec, role, axis=None):
        self.spec = spec
        self.role = role
        mode = "minmax" if role == "weight" else spec.observer
        self.observer = Observer(mode, spec.observer_momentum, axis)
        self.state = None
        self.observe = True
        self.enabled = True

    def update(self, data):
        if self.role == "weight":
            self.observer.reset()
        self.observer.update(data)
        self.state = compute_qparams(self.observer, self.spec, self.role)

    def __call__(self, x, training):
        if training and self.observe:
            self.update(x.data)
        if not self.enabled:
            return x
        state = self.state
        if state is None:
            if self.role != "weight":
                raise CalibrationError("activation fake-quant used before calibration")
            # weights are known at deploy time: derive qparams without mutating the node
            obs = Observer("minmax", axis=self.observer.axis)
            obs.update(x.data)
            state = compute_qparams(obs, self.spec, self.role)
        return T.fake_quant(x, state.scale, state.zero_point, state.qmin, state.qmax, state.axis, _surrogate)

    def state_arrays(self):
        empty = np.zeros(0, dtype=np.float64)
        s = self.state
        return {
            "scale": s.scale if s is not None else np.zeros(0, dtype=np.float32),
            "zero_point": s.zero_point if s is not None else np.zeros(0, dtype=np.int32),
            "obs_min": np.atleast_1d(self.observer.min).astype(np.float64) if self.observer.initialized else empty,
            "obs_max": np.atleast_1d(self.observer.max).astype(np.float64) if self.observer.initialized else empty,
        }

    def load_state_arrays(self, arrays):
        axis = self.observer.axis
        if arrays["obs_min"].size:
            shape = () if axis is None else arrays["obs_min"].shape
            self.observer.min = arrays["obs_min"].reshape(shape)
            self.observer.max = arrays["obs_max"].reshape(shape)
        else:
            self.observer.reset()
        if arrays["scale"].size:
            shape = () if axis is None else arrays["scale"].shape
            qmin, qmax = self.spec.qrange()
            self.state = FakeQuantState(arrays["scale"].reshape(shape), arrays["zero_point"].reshape(shape), qmin, qmax, axis)
        else:
            self.state = None


def _weight_axis(layer, spec):
    if spec.weight_scheme != PER_CHANNEL_SYMMETRIC:
        return None
    return 0 if isinstance(layer, Conv2d) else 1


def prepare_qat(float_model, spec):
    """Deep copy of ``float_model`` with fake-quant on every weight and layer output.

    Flatten is a pure reshape and gets no activation node.
    """
    model = float_model.copy()
    for layer in model.layers:
        if isinstance(layer, (Dense, Conv2d)):
            layer.weight_fq = FakeQuant(spec, "weight", _weight_axis(layer, spec))
        if not isinstance(layer, Flatten):
            layer.act_fq = FakeQuant(spec, "activation")
    model.quant_spec = spec
    model.train()
    return model


def _nodes(model, role=None):
    return [n for _, n in model.fake_quant_nodes() if role is None or n.role == role]


def freeze_observers(model, role=None):
    for node in _nodes(model, role):
        node.observe = False
    return model


def enable_observers(model, role=None):
    for node in _nodes(model, role):
        node.observe = True
    return model


def set_fake_quant(model, enabled):
    for node in _nodes(model):
        node.enabled = enabled
    return model


def refresh_weight_qparams(model):
    """Recompute weight qparams from the current weights of non-frozen nodes."""
    for layer in model.layers:
        node = layer.weight_fq
        if node is not None and node.observe:
            node.update(layer.weight.data)
    return model


def ptq(float_model, spec, calibration_batches):
    """Post-training quantization: observe ranges on calibration data, then freeze.

    Fake quantization is bypassed while observing so later layers see float
    activations, and no parameter is touched.
    """
    batches = list(calibration_batches)
    if not batches:
        raise CalibrationError("PTQ needs at least one calibration batch")
    model = prepare_qat(float_model, spec)
    set_fake_quant(model, False)
    model.train()
    with no_grad():
        for b in batches:
            model.forward(b)
    freeze_observers(model)
    set_fake_quant(model, True)
    return model.eval()


def qparams_snapshot(model):
    """(name, scale copy, zero_point copy) for every node with a state."""
    return [(name, n.state.scale.copy(), n.state.zero_point.copy())
            for name, n in model.fake_quant_nodes() if n.state is not None]
