"""Discrete-time LIF / LI neuron simulation and spiking blocks.

Dynamics (forward Euler, dt = 1 step) shared by both neuron kinds::

    i' = i + (-i) / tau_syn + input
    v' = v + (v_leak - v) / tau_mem + i'

LIF neurons emit ``s = H(v' - v_th)`` and hard-reset to ``v_reset``; LI
neurons never spike and are used as real-valued readouts (their voltage at
the last step is the output).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigurationError, ContractViolation, NumericInputError, StateError

__all__ = [
    "NeuronParams",
    "LifState",
    "LiState",
    "SpikeTrain",
    "SimConfig",
    "SuperSpike",
    "spike_fn",
    "lif_step",
    "li_step",
    "lif_run",
    "li_run",
    "encode",
    "encode_direct",
    "SpikeRecorder",
    "SpikingBlock",
    "run_block",
    "spike_activity_record",
]


@dataclass(frozen=True)
class NeuronParams:
    tau_syn: float = 2.0
    tau_mem: float = 4.0
    v_th: float = 1.0
    v_leak: float = 0.0
    v_reset: float = 0.0
    beta: float = 10.0

    def __post_init__(self) -> None:
        vals = (self.tau_syn, self.tau_mem, self.v_th, self.v_leak, self.v_reset, self.beta)
        if not all(math.isfinite(float(x)) for x in vals):
            raise ConfigurationError(f"non-finite neuron parameter in {self}")
        if self.tau_syn <= 0 or self.tau_mem <= 0:
            raise ConfigurationError("tau_syn and tau_mem must be positive")
        if not self.v_th > self.v_leak >= self.v_reset:
            raise ConfigurationError("need v_th > v_leak >= v_reset")
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("tau_syn", "tau_mem", "v_th", "v_leak", "v_reset", "beta")}

    @classmethod
    def from_dict(cls, d: dict) -> "NeuronParams":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class LifState:
    i: Tensor
    v: Tensor

    def __post_init__(self) -> None:
        if self.i.shape != self.v.shape:
            raise ContractViolation(f"current {tuple(self.i.shape)} and voltage {tuple(self.v.shape)} differ")

    @classmethod
    def rest(cls, shape, params: NeuronParams, dtype=torch.float32) -> "LifState":
        return cls(torch.zeros(shape, dtype=dtype), torch.full(shape, params.v_leak, dtype=dtype))


class LiState(LifState):
    """Readout state; same fields as :class:`LifState` but never reset."""


@dataclass
class SpikeTrain:
    events: Tensor  # (T, D), entries in {0, 1}

    def __post_init__(self) -> None:
        if self.events.dim() < 1 or self.events.shape[0] < 1:
            raise ContractViolation("spike train needs at least one time step")

    @property
    def t_steps(self) -> int:
        return int(self.events.shape[0])

    def counts(self) -> Tensor:
        return self.events.sum(dim=0)


@dataclass(frozen=True)
class SimConfig:
    t_steps: int
    dt: float = field(default=1.0, init=False)

    def __post_init__(self) -> None:
        if int(self.t_steps) < 1:
            raise ConfigurationError("t_steps must be >= 1")


class SuperSpike(torch.autograd.Function):
    """Heaviside forward, fast-sigmoid derivative ``1 / (beta |x| + 1)^2`` backward."""

    @staticmethod
    def forward(ctx, x: Tensor, beta: float) -> Tensor:
        ctx.save_for_backward(x)
        ctx.beta = beta
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad: Tensor):
        (x,) = ctx.saved_tensors
        return grad / (ctx.beta * x.abs() + 1.0) ** 2, None


def fast_sigmoid(x: Tensor, beta: float) -> Tensor:
    return 0.5 * (1.0 + beta * x / (1.0 + beta * x.abs()))


def spike_fn(x: Tensor, beta: float, soft: bool = False) -> Tensor:
    """Spike nonlinearity on ``x = v - v_th``.

    ``soft=True`` is the gradient-verification mode: the forward pass is the
    smooth fast sigmoid itself, so autograd yields its exact derivative.
    """
    if soft:
        return fast_sigmoid(x, beta)
    return SuperSpike.apply(x, beta)


def _check_input(state: LifState, current: Tensor) -> None:
    if current.shape != state.v.shape:
        raise ContractViolation(f"input {tuple(current.shape)} does not match population {tuple(state.v.shape)}")
    if not bool(torch.isfinite(current).all()):
        raise NumericInputError("non-finite input current")


def _integrate(state: LifState, current: Tensor, p: NeuronParams) -> tuple[Tensor, Tensor]:
    i = state.i + (-state.i) * (1.0 / p.tau_syn) + current
    v = state.v + (p.v_leak - state.v) * (1.0 / p.tau_mem) + i
    return i, v


def lif_step(state: LifState, input_current: Tensor, params: NeuronParams, soft: bool = False) -> tuple[LifState, Tensor]:
    _check_input(state, input_current)
    i, v = _integrate(state, input_current, params)
    z = spike_fn(v - params.v_th, params.beta, soft)
    if soft:
        v = v * (1.0 - z) + params.v_reset * z
    else:
        # reset kept out of the backward graph
        v = torch.where(z.detach() > 0, torch.full_like(v, params.v_reset), v)
    return LifState(i, v), z


def li_step(state: LiState, input_current: Tensor, params: NeuronParams) -> LiState:
    _check_input(state, input_current)
    i, v = _integrate(state, input_current, params)
    return LiState(i, v)


def lif_run(currents: Tensor, params: NeuronParams, soft: bool = False) -> Tensor:
    """Simulate a LIF population over ``currents`` of shape (T, ...); return spikes (T, ...)."""
    state = LifState.rest(currents.shape[1:], params, currents.dtype)
    out = []
    for t in range(currents.shape[0]):
        state, z = lif_step(state, currents[t], params, soft)
        out.append(z)
    return torch.stack(out)


def li_run(currents: Tensor, params: NeuronParams) -> Tensor:
    """Simulate an LI population over (T, ...) currents; return the final voltage."""
    state = LiState.rest(currents.shape[1:], params, currents.dtype)
    for t in range(currents.shape[0]):
        state = li_step(state, currents[t], params)
    return state.v


def encode(features: Tensor, params: NeuronParams, t_steps: int, soft: bool = False) -> Tensor:
    """Direct encoding of a real tensor: each entry drives its own LIF neuron.

    Negative values inject no current. Returns spikes of shape (T, *features.shape).
    """
    if int(t_steps) < 1:
        raise ConfigurationError("t_steps must be >= 1")
    if not bool(torch.isfinite(features).all()):
        raise NumericInputError("non-finite feature value")
    current = features.clamp(min=0.0)
    return lif_run(current.unsqueeze(0).expand(int(t_steps), *current.shape), params, soft)


def encode_direct(features: Tensor, params: NeuronParams, t_steps: int) -> SpikeTrain:
    features = torch.as_tensor(features)
    if features.dim() != 1:
        raise ContractViolation("encode_direct expects a feature vector")
    return SpikeTrain(encode(features, params, t_steps))


class SpikeRecorder:
    """Accumulates per-population spike rates over processed instances."""

    def __init__(self) -> None:
        self.rate_sums: dict[str, float] = {}
        self.instances: dict[str, int] = {}
        self.neurons: dict[str, int] = {}

    def add(self, name: str, spikes: Tensor) -> None:
        # spikes: (T, B, ...) -> one rate per instance b
        t, b = spikes.shape[0], spikes.shape[1]
        per_instance = spikes.detach().reshape(t, b, -1)
        n = per_instance.shape[2]
        rates = per_instance.sum(dim=(0, 2)).double() / (n * t)
        self.rate_sums[name] = self.rate_sums.get(name, 0.0) + float(rates.sum())
        self.instances[name] = self.instances.get(name, 0) + b
        self.neurons[name] = n

    def activity(self) -> dict[str, float]:
        return {k: self.rate_sums[k] / self.instances[k] for k in self.rate_sums if self.instances[k]}

    def merge(self, other: "SpikeRecorder") -> None:
        for k, v in other.rate_sums.items():
            self.rate_sums[k] = self.rate_sums.get(k, 0.0) + v
            self.instances[k] = self.instances.get(k, 0) + other.instances[k]
            self.neurons[k] = other.neurons[k]


def _apply_stacked(layer: nn.Module, x: Tensor) -> Tensor:
    # fold time into the batch axis so every step shares one kernel call
    t, b = x.shape[0], x.shape[1]
    y = layer(x.reshape(t * b, *x.shape[2:]))
    return y.reshape(t, b, *y.shape[1:])


class SpikingBlock(nn.Module):
    """Encoder -> [synaptic layer -> LIF]* -> synaptic layer -> LI readout.

    With ``spiking=False`` the same synaptic layers run once with ReLU
    between them (the structurally identical conventional head).

    Input has a leading batch axis; every batch element is one instance for
    spike-activity bookkeeping. Population names are ``encoder`` and
    ``hidden{k}``; synaptic layer ``k`` consumes population ``k``.
    """

    def __init__(
        self,
        layers: Sequence[nn.Module],
        encoder: NeuronParams | None = None,
        hidden: NeuronParams | None = None,
        readout: NeuronParams | None = None,
        spiking: bool = True,
    ) -> None:
        super().__init__()
        if len(layers) < 1:
            raise ConfigurationError("a block needs at least one synaptic layer")
        self.layers = nn.ModuleList(layers)
        self.encoder = encoder or NeuronParams()
        self.hidden = hidden or NeuronParams()
        self.readout = readout or NeuronParams()
        self.spiking = spiking
        self.soft = False
        self.recorder: SpikeRecorder | None = None
        # when a list, each hidden population's mean rate is appended with its
        # graph; encoder rates follow the input features and are left alone
        self.rate_terms: list[Tensor] | None = None

    def population_names(self) -> list[str]:
        return ["encoder"] + [f"hidden{k}" for k in range(1, len(self.layers))]

    def forward(self, x: Tensor, t_steps: int = 1) -> Tensor:
        if not self.spiking:
            h = x
            for k, layer in enumerate(self.layers):
                h = layer(h)
                if k < len(self.layers) - 1:
                    h = torch.relu(h)
            return h
        if int(t_steps) < 1:
            raise ConfigurationError("t_steps must be >= 1")
        s = encode(x, self.encoder, t_steps, self.soft)
        names = self.population_names()
        for k, layer in enumerate(self.layers):
            if self.recorder is not None:
                self.recorder.add(names[k], s)
            if self.rate_terms is not None and k > 0:
                self.rate_terms.append(s.mean())
            try:
                cur = _apply_stacked(layer, s)
            except RuntimeError as exc:
                raise ConfigurationError(f"layer {k} incompatible with its input: {exc}") from exc
            if k == len(self.layers) - 1:
                return li_run(cur, self.readout)
            s = lif_run(cur, self.hidden, self.soft)
        raise AssertionError("unreachable")


def run_block(
    encoder_params: NeuronParams,
    layers: Sequence[nn.Module],
    readout_params: NeuronParams,
    input_features: Tensor,
    t_steps: int,
    hidden_params: NeuronParams | None = None,
    recorder: SpikeRecorder | None = None,
) -> Tensor:
    """Functional form of :class:`SpikingBlock` for a single call."""
    block = SpikingBlock(layers, encoder_params, hidden_params or encoder_params, readout_params)
    block.recorder = recorder
    return block(input_features, t_steps)


def spike_activity_record(block: SpikingBlock | SpikeRecorder) -> dict[str, float]:
    rec = block if isinstance(block, SpikeRecorder) else block.recorder
    if rec is None:
        raise StateError("spike recording was not enabled for this block")
    return rec.activity()
