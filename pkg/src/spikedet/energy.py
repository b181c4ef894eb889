"""FLOPs / spike-activity energy model.

Conventional layers cost ``FLOPs_ANN * E_MAC``; spiking layers cost
``FLOPs_ANN * T * S_A * E_AC`` where ``S_A`` is the average spike rate of
the population feeding the layer. Layers that are conventional in both
models (the backbone) are charged at the MAC rate on both sides, so the
whole-model ratio is reported next to a spiking-modules-only ratio.

Only conv/linear synaptic operations are counted; biases, encoders and
neuron state updates are not.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .errors import ConfigurationError, ContractViolation, StateError

E_MAC_PJ = 4.6
E_AC_PJ = 0.9
BREAK_EVEN = E_MAC_PJ / E_AC_PJ  # a spiking layer wins iff T * S_A < this
ENERGY_FORMAT = "spikedet-energy"
ENERGY_VERSION = 1
TABLE_COLUMNS = (
    "name", "kind", "O", "k", "c_in", "c_out", "repeats", "spiking", "t_steps", "s_a",
    "flops_ann", "flops_snn", "e_ann_pj", "e_snn_pj", "reduction",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    c_in: int
    c_out: int
    O: int | None = None
    k: int | None = None
    repeats: float = 1.0  # applications per image (e.g. RoIs through a head)

    def __post_init__(self) -> None:
        if self.kind not in ("conv", "linear"):
            raise ConfigurationError(f"unsupported layer kind {self.kind!r}")
        if self.c_in <= 0 or self.c_out <= 0 or self.repeats < 0:
            raise ContractViolation("channel counts must be positive")
        if self.kind == "conv":
            if self.O is None or self.k is None or self.O <= 0 or self.k <= 0:
                raise ContractViolation("conv layers need positive O and k")
        elif self.O is not None or self.k is not None:
            raise ContractViolation("linear layers take no O or k")


def flops_ann(layer: LayerSpec) -> float:
    if layer.kind == "conv":
        f = layer.O**2 * layer.c_in * layer.k**2 * layer.c_out
    elif layer.kind == "linear":
        f = layer.c_in * layer.c_out
    else:
        raise ConfigurationError(f"unsupported layer kind {layer.kind!r}")
    return f * layer.repeats if layer.repeats != 1 else f


def flops_snn(layer: LayerSpec, t_steps: int, s_a: float) -> float:
    if s_a < 0 or not math.isfinite(s_a):
        raise ContractViolation("spike activity must be finite and >= 0")
    if t_steps < 1:
        raise ContractViolation("t_steps must be >= 1")
    return flops_ann(layer) * t_steps * s_a


@dataclass(frozen=True)
class EnergyLayer:
    name: str
    spec: LayerSpec
    spiking: bool = False
    t_steps: int = 1
    s_a: float | None = None


@dataclass
class LayerEnergy:
    name: str
    spec: LayerSpec
    spiking: bool
    t_steps: int
    s_a: float | None
    flops_ann: float
    flops_snn: float | None
    e_ann: float
    e_snn: float

    @property
    def reduction(self) -> float:
        """Fractional saving of this layer (0.85 means 85 % less energy)."""
        return 1.0 - self.e_snn / self.e_ann if self.e_ann else 0.0


@dataclass
class EnergyReport:
    layers: list[LayerEnergy]
    e_ann: float
    e_snn: float
    delta_e: float
    e_ann_spiking: float
    e_snn_spiking: float
    delta_e_spiking: float
    e_mac: float = E_MAC_PJ
    e_ac: float = E_AC_PJ
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": ENERGY_FORMAT,
            "version": ENERGY_VERSION,
            "units": "pJ",
            "constants": {"e_mac": self.e_mac, "e_ac": self.e_ac},
            "totals": {
                "e_ann": self.e_ann,
                "e_snn": self.e_snn,
                "delta_e": self.delta_e,
                "e_ann_spiking": self.e_ann_spiking,
                "e_snn_spiking": self.e_snn_spiking,
                "delta_e_spiking": self.delta_e_spiking,
            },
            "layers": [
                {
                    "name": l.name,
                    "spec": asdict(l.spec),
                    "spiking": l.spiking,
                    "t_steps": l.t_steps,
                    "s_a": l.s_a,
                    "flops_ann": l.flops_ann,
                    "flops_snn": l.flops_snn,
                    "e_ann": l.e_ann,
                    "e_snn": l.e_snn,
                }
                for l in self.layers
            ],
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyReport":
        if d.get("format") != ENERGY_FORMAT:
            raise ConfigurationError("not a spikedet-energy record")
        layers = [
            LayerEnergy(
                l["name"], LayerSpec(**l["spec"]), l["spiking"], l["t_steps"], l["s_a"],
                l["flops_ann"], l["flops_snn"], l["e_ann"], l["e_snn"],
            )
            for l in d["layers"]
        ]
        t = d["totals"]
        c = d["constants"]
        return cls(layers, t["e_ann"], t["e_snn"], t["delta_e"], t["e_ann_spiking"], t["e_snn_spiking"],
                   t["delta_e_spiking"], c["e_mac"], c["e_ac"], d.get("meta", {}))

    def table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for l in self.layers:
            s = l.spec
            w.writerow([
                l.name, s.kind, "" if s.O is None else s.O, "" if s.k is None else s.k, s.c_in, s.c_out,
                repr(float(s.repeats)), int(l.spiking), l.t_steps, "" if l.s_a is None else repr(float(l.s_a)),
                repr(float(l.flops_ann)), "" if l.flops_snn is None else repr(float(l.flops_snn)),
                repr(float(l.e_ann)), repr(float(l.e_snn)), repr(float(l.reduction)),
            ])
        return buf.getvalue()


def energy_totals(layers: Sequence[EnergyLayer], e_mac: float = E_MAC_PJ, e_ac: float = E_AC_PJ) -> EnergyReport:
    rows = []
    for layer in layers:
        fa = flops_ann(layer.spec)
        if layer.spiking:
            if layer.s_a is None:
                raise StateError(f"no spike activity recorded for spiking layer {layer.name}")
            fs = flops_snn(layer.spec, layer.t_steps, layer.s_a)
            rows.append(LayerEnergy(layer.name, layer.spec, True, layer.t_steps, layer.s_a, fa, fs, fa * e_mac, fs * e_ac))
        else:
            rows.append(LayerEnergy(layer.name, layer.spec, False, 1, None, fa, None, fa * e_mac, fa * e_mac))
    e_ann = sum(r.e_ann for r in rows)
    e_snn = sum(r.e_snn for r in rows)
    spk = [r for r in rows if r.spiking]
    ea_s = sum(r.e_ann for r in spk)
    es_s = sum(r.e_snn for r in spk)
    return EnergyReport(
        rows,
        e_ann,
        e_snn,
        e_snn / e_ann if e_ann else 1.0,
        ea_s,
        es_s,
        es_s / ea_s if ea_s else 1.0,  # nothing spiking: same cost as the twin
        e_mac,
        e_ac,
    )


def model_energy_layers(model, recorders: dict | None, config, image_size: tuple[int, int], rois_per_image: float) -> list[EnergyLayer]:
    """Describe every synaptic layer of a :class:`~spikedet.pipeline.SpikeDetector`.

    ``recorders`` maps ``rpn.P<l>`` / ``det`` to the spike recorders filled
    during evaluation; they are required when the model is spiking.
    """
    width, height = image_size
    if width != height:
        raise ConfigurationError("the energy model assumes square feature maps")
    spiking = model.spiking
    if spiking and not recorders:
        raise StateError("spiking model evaluated without spike recording")
    out: list[EnergyLayer] = []
    side, c_prev = width, 3
    for s, stage in enumerate(model.backbone.trunk.stages, start=1):
        side = (side + 1) // 2
        c = stage[0].out_channels
        out.append(EnergyLayer(f"trunk.s{s}.conv1", LayerSpec("conv", c_prev, c, side, 3)))
        out.append(EnergyLayer(f"trunk.s{s}.conv2", LayerSpec("conv", c, c, side, 3)))
        c_prev = c
    sides = {st: width // (2**st) for st in model.backbone.pyramid_stages}
    pyr = model.backbone.pyramid
    for st, lat, sm in zip(model.backbone.pyramid_stages, pyr.laterals, pyr.smooths):
        out.append(EnergyLayer(f"pyramid.P{st}.lateral", LayerSpec("conv", lat.in_channels, lat.out_channels, sides[st], 1)))
        out.append(EnergyLayer(f"pyramid.P{st}.smooth", LayerSpec("conv", sm.in_channels, sm.out_channels, sides[st], 3)))

    def activity(key: str, pop: str) -> float | None:
        if not spiking:
            return None
        rec = recorders.get(key)
        if rec is None or pop not in rec.activity():
            raise StateError(f"missing spike activity for {key}/{pop}")
        return rec.activity()[pop]

    conv, read = model.rpn_head.layers
    for st in model.backbone.pyramid_stages:
        key = f"rpn.P{st}"
        out.append(EnergyLayer(f"{key}.conv", LayerSpec("conv", conv.in_channels, conv.out_channels, sides[st], 3),
                               spiking, config.t_rpn if spiking else 1, activity(key, "encoder")))
        out.append(EnergyLayer(f"{key}.readout", LayerSpec("conv", read.in_channels, read.out_channels, sides[st], 1),
                               spiking, config.t_rpn if spiking else 1, activity(key, "hidden1")))
    fc, dread = model.det_head.layers
    out.append(EnergyLayer("det.fc", LayerSpec("linear", fc.in_features, fc.out_features, repeats=rois_per_image),
                           spiking, config.t_det if spiking else 1, activity("det", "encoder")))
    out.append(EnergyLayer("det.readout", LayerSpec("linear", dread.in_features, dread.out_features, repeats=rois_per_image),
                           spiking, config.t_det if spiking else 1, activity("det", "hidden1")))
    return out
