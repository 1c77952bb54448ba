"""Tiny dense networks on flat parameter vectors, with manual backprop.

Everything a policy owns lives in one flat float64 vector so the same
parameters can be consumed by the gradient learner (which needs exact
gradients from the hand-written backward pass) and by the evolutionary
learner (which treats the vector as a genome). A preset names the
networks packed into the vector and fixes their order, so serialized
policies are portable across tools.

Conventions: hidden activations are tanh, outputs are linear, weights of
a layer are stored row-major as (fan_out, fan_in) followed by the bias.
In a choice head, output index 0 is "accept" and index 1 is "refuse".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "NetworkSpec",
    "Segment",
    "Preset",
    "PRESETS",
    "ParamVector",
    "GaussianHead",
    "CategoricalHead",
    "InvestmentSample",
    "ChoiceSample",
    "param_count",
    "net_forward",
    "net_backward",
    "choice_probs",
    "log_softmax",
    "gaussian_log_prob",
    "sample_investment",
    "sample_choice",
    "init_params",
]

# Numerical guard only; adapted log stds stay far inside this range.
LOG_STD_MIN = -20.0
LOG_STD_MAX = 10.0


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of one dense network: tanh hidden layers, linear output."""

    input_size: int
    hidden_sizes: tuple[int, ...]
    output_size: int
    bias: bool = True

    @property
    def layer_dims(self) -> tuple[tuple[int, int], ...]:
        sizes = (self.input_size, *self.hidden_sizes, self.output_size)
        return tuple(zip(sizes[:-1], sizes[1:]))

    @property
    def param_count(self) -> int:
        extra = 1 if self.bias else 0
        return sum((fi + extra) * fo for fi, fo in self.layer_dims)


@dataclass(frozen=True)
class Segment:
    """A named slice of a flat parameter vector.

    ``net`` is set when the slice holds a dense network's weights; raw
    slices (a bare investment value, inert padding) leave it None.
    """

    name: str
    length: int
    net: NetworkSpec | None = None


_CHOICE_MLP = NetworkSpec(2, (3,), 2)
_CHOICE_MLP_CRITIC = NetworkSpec(2, (3,), 1)
_CHOICE_DEEP = NetworkSpec(2, (256, 256), 2)
_CHOICE_DEEP_CRITIC = NetworkSpec(2, (256, 256), 1)
# The investment head has a single input pinned to 1.0 and no separate
# bias, so its two weights ARE the mean and log-std.
_INVEST_ACTOR = NetworkSpec(1, (), 2, bias=False)
_INVEST_CRITIC = NetworkSpec(1, (), 1, bias=False)


@dataclass(frozen=True)
class Preset:
    """Ordered packing of segments into one flat vector."""

    name: str
    pid: int
    segments: tuple[Segment, ...]
    _offsets: dict = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self) -> None:
        offsets = {}
        at = 0
        for seg in self.segments:
            if seg.net is not None and seg.net.param_count != seg.length:
                raise ValueError(f"segment {seg.name} length mismatch")
            offsets[seg.name] = (at, seg.length)
            at += seg.length
        object.__setattr__(self, "_offsets", offsets)

    @property
    def param_count(self) -> int:
        return sum(seg.length for seg in self.segments)

    def offset(self, name: str) -> tuple[int, int]:
        return self._offsets[name]

    def network(self, name: str) -> NetworkSpec:
        for seg in self.segments:
            if seg.name == name:
                if seg.net is None:
                    raise ValueError(f"segment {name} is not a network")
                return seg.net
        raise KeyError(name)


PRESETS: dict[str, Preset] = {
    "PPO-MLP": Preset(
        "PPO-MLP",
        1,
        (
            Segment("invest_actor", _INVEST_ACTOR.param_count, _INVEST_ACTOR),
            Segment("invest_critic", _INVEST_CRITIC.param_count, _INVEST_CRITIC),
            Segment("choice_actor", _CHOICE_MLP.param_count, _CHOICE_MLP),
            Segment("choice_critic", _CHOICE_MLP_CRITIC.param_count, _CHOICE_MLP_CRITIC),
        ),
    ),
    "PPO-DEEP": Preset(
        "PPO-DEEP",
        2,
        (
            Segment("invest_actor", _INVEST_ACTOR.param_count, _INVEST_ACTOR),
            Segment("invest_critic", _INVEST_CRITIC.param_count, _INVEST_CRITIC),
            Segment("choice_actor", _CHOICE_DEEP.param_count, _CHOICE_DEEP),
            Segment("choice_critic", _CHOICE_DEEP_CRITIC.param_count, _CHOICE_DEEP_CRITIC),
        ),
    ),
    "CMAES": Preset(
        "CMAES",
        3,
        (
            Segment("investment", 1),
            Segment("choice", _CHOICE_MLP.param_count, _CHOICE_MLP),
            Segment("dummy", 16),
        ),
    ),
}

_PRESET_BY_ID = {preset.pid: preset for preset in PRESETS.values()}


def param_count(preset: str) -> int:
    return PRESETS[preset].param_count


class ParamVector:
    """A preset name plus the flat float64 values it lays out."""

    __slots__ = ("preset", "values")

    def __init__(self, preset: str, values: np.ndarray) -> None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        values = np.asarray(values, dtype=np.float64)
        expected = PRESETS[preset].param_count
        if values.shape != (expected,):
            raise ValueError(
                f"preset {preset} needs {expected} values, got {values.shape}"
            )
        self.preset = preset
        self.values = values

    def segment(self, name: str) -> np.ndarray:
        off, length = PRESETS[self.preset].offset(name)
        return self.values[off : off + length]

    def network(self, name: str) -> NetworkSpec:
        return PRESETS[self.preset].network(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.preset, self.values.copy())

    # File format: magic, version, preset id, count, little-endian doubles.
    _MAGIC = b"PVEC"

    def to_bytes(self) -> bytes:
        header = struct.pack(
            "<4sBBHI", self._MAGIC, 1, PRESETS[self.preset].pid, 0, self.values.size
        )
        return header + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamVector":
        if len(blob) < 12:
            raise ValueError("policy blob too short")
        magic, version, pid, _, count = struct.unpack("<4sBBHI", blob[:12])
        if magic != cls._MAGIC:
            raise ValueError("not a parameter-vector blob")
        if version != 1:
            raise ValueError(f"unsupported format version {version}")
        preset = _PRESET_BY_ID.get(pid)
        if preset is None:
            raise ValueError(f"unknown preset id {pid}")
        values = np.frombuffer(blob[12:], dtype="<f8")
        if values.size != count or count != preset.param_count:
            raise ValueError("parameter count mismatch")
        return cls(preset.name, values.astype(np.float64))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamVector":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class NetTape(NamedTuple):
    spec: NetworkSpec
    weights: tuple
    x: np.ndarray
    hiddens: tuple


def _slice_layers(spec: NetworkSpec, params: np.ndarray):
    """Views of (W, b) per layer from the flat segment; b is None when
    the spec has no bias."""
    layers = []
    at = 0
    for fan_in, fan_out in spec.layer_dims:
        w = params[at : at + fan_in * fan_out].reshape(fan_out, fan_in)
        at += fan_in * fan_out
        b = None
        if spec.bias:
            b = params[at : at + fan_out]
            at += fan_out
        layers.append((w, b))
    return layers


def net_forward(
    spec: NetworkSpec, params: np.ndarray, x: np.ndarray
) -> tuple[np.ndarray, NetTape]:
    """Batched forward pass. ``x`` is (batch, input_size); returns the
    (batch, output_size) activations and the tape backward needs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_size:
        raise ValueError(f"input shape {x.shape} does not match spec")
    layers = _slice_layers(spec, params)
    hiddens = []
    h = x
    for w, b in layers[:-1]:
        z = h @ w.T
        if b is not None:
            z += b
        h = np.tanh(z)
        hiddens.append(h)
    w, b = layers[-1]
    y = h @ w.T
    if b is not None:
        y = y + b
    return y, NetTape(spec, tuple(layers), x, tuple(hiddens))


def net_backward(tape: NetTape, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of sum(output * dy) w.r.t. the flat params and the input."""
    spec, layers, x, hiddens = tape
    dy = np.asarray(dy, dtype=np.float64)
    grads = [None] * len(layers)
    d = dy
    for li in range(len(layers) - 1, -1, -1):
        w, b = layers[li]
        below = hiddens[li - 1] if li > 0 else x
        dw = d.T @ below
        db = d.sum(axis=0) if b is not None else None
        grads[li] = (dw, db)
        d = d @ w
        if li > 0:
            h = hiddens[li - 1]
            d = d * (1.0 - h * h)
    dx = d
    flat = np.empty(spec.param_count)
    at = 0
    for dw, db in grads:
        n = dw.size
        flat[at : at + n] = dw.ravel()
        at += n
        if db is not None:
            flat[at : at + db.size] = db
            at += db.size
    return flat, dx


class GaussianHead(NamedTuple):
    mean: float
    log_std: float


class CategoricalHead(NamedTuple):
    logits: np.ndarray


class InvestmentSample(NamedTuple):
    value: float
    raw: float
    log_prob: float


class ChoiceSample(NamedTuple):
    accept: bool
    log_prob: float


def gaussian_log_prob(raw: float, mean: float, log_std: float) -> float:
    log_std = min(max(log_std, LOG_STD_MIN), LOG_STD_MAX)
    z = (raw - mean) / np.exp(log_std)
    return float(-0.5 * z * z - log_std - 0.5 * np.log(2.0 * np.pi))


def sample_investment(
    head: GaussianHead,
    rng: np.random.Generator,
    lo: float = 0.0,
    hi: float = 15.0,
) -> InvestmentSample:
    """Draw an investment through the normalized action convention.

    The Gaussian lives in [-1, 1] coordinates so that a unit-std head
    explores the whole investment range. The log-prob is that of the raw
    unclipped draw; the draw is then clipped to [-1, 1] and mapped
    affinely onto [lo, hi]. Clipping and rescaling are not part of the
    density.
    """
    log_std = min(max(head.log_std, LOG_STD_MIN), LOG_STD_MAX)
    raw = head.mean + np.exp(log_std) * rng.standard_normal()
    lp = gaussian_log_prob(raw, head.mean, log_std)
    unit = min(max(raw, -1.0), 1.0)
    action = lo + (unit + 1.0) * 0.5 * (hi - lo)
    return InvestmentSample(float(action), float(raw), lp)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def choice_probs(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def sample_choice(head: CategoricalHead, rng: np.random.Generator) -> ChoiceSample:
    lp = log_softmax(head.logits)
    accept = rng.random() < np.exp(lp[0])
    return ChoiceSample(bool(accept), float(lp[0] if accept else lp[1]))


def init_params(preset: str, rng: np.random.Generator) -> ParamVector:
    """Fresh parameters. The evolutionary preset starts at the origin;
    gradient presets use uniform fan-in scaling with zero biases, and the
    investment head's log-std weight starts at 0 so the unit-std Gaussian
    spans the whole normalized action interval from the first episode."""
    spec_preset = PRESETS[preset]
    values = np.zeros(spec_preset.param_count)
    pv = ParamVector(preset, values)
    if preset == "CMAES":
        return pv
    for seg in spec_preset.segments:
        if seg.net is None:
            continue
        segment = pv.segment(seg.name)
        at = 0
        for fan_in, fan_out in seg.net.layer_dims:
            bound = 1.0 / np.sqrt(fan_in)
            n = fan_in * fan_out
            segment[at : at + n] = rng.uniform(-bound, bound, size=n)
            at += n
            if seg.net.bias:
                segment[at : at + fan_out] = 0.0
                at += fan_out
    pv.segment("invest_actor")[1] = 0.0
    return pv
