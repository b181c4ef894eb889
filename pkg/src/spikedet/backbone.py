"""Small convolutional trunk with a top-down feature pyramid (non-spiking)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError


@dataclass
class FeatureMaps:
    level_ids: list[int]
    maps: list[Tensor]  # each (B, C, H_l, W_l)
    strides: list[int]

    def __post_init__(self) -> None:
        if not (len(self.level_ids) == len(self.maps) == len(self.strides)):
            raise ConfigurationError("level ids, maps and strides must align")
        if len({m.shape[1] for m in self.maps}) != 1:
            raise ConfigurationError("all pyramid levels must share a channel count")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ConfigurationError("strides must strictly increase with level")

    @property
    def levels(self) -> list[tuple[int, Tensor]]:
        return list(zip(self.level_ids, self.maps))

    @property
    def channels(self) -> int:
        return int(self.maps[0].shape[1])

    def shapes(self) -> list[tuple[int, int]]:
        return [(int(m.shape[-2]), int(m.shape[-1])) for m in self.maps]

    def select(self, index: int) -> "FeatureMaps":
        """Maps of a single image, batch axis kept."""
        return FeatureMaps(self.level_ids, [m[index : index + 1] for m in self.maps], self.strides)


def conv_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with shape checks; accepts (C, H, W) or (B, C, H, W)."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4 or weight.dim() != 4:
        raise ConfigurationError("conv_forward expects 4-D input and kernel")
    if x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    k_h, k_w = weight.shape[-2:]
    if x.shape[-2] + 2 * padding < k_h or x.shape[-1] + 2 * padding < k_w:
        raise ConfigurationError("kernel larger than padded input")
    y = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    return y[0] if squeeze else y


def upsample2(x: Tensor, size: tuple[int, int] | None = None) -> Tensor:
    """Nearest-neighbour x2 upsampling (cropped to ``size`` when given)."""
    y = x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
    if size is not None:
        y = y[..., : size[0], : size[1]]
    return y


def pyramid_forward(
    trunk_outputs: Sequence[Tensor],
    laterals: Sequence[nn.Module],
    smooths: Sequence[nn.Module] | None = None,
) -> list[Tensor]:
    """Top-down pathway, finest stage first in ``trunk_outputs``.

    ``merged_l = lateral_l(C_l) + up2(merged_{l+1})`` and the output of each
    level is ``smooth_l(merged_l)`` (identity when ``smooths`` is None).
    """
    if len(trunk_outputs) != len(laterals):
        raise ConfigurationError("one lateral projection per trunk stage")
    merged: list[Tensor] = [None] * len(trunk_outputs)  # type: ignore[list-item]
    top = None
    for k in range(len(trunk_outputs) - 1, -1, -1):
        try:
            lat = laterals[k](trunk_outputs[k])
        except RuntimeError as exc:
            raise ConfigurationError(f"lateral {k} does not fit its trunk stage: {exc}") from exc
        if top is not None:
            up = upsample2(top, lat.shape[-2:])
            if up.shape != lat.shape:
                raise ConfigurationError("pyramid levels must share channels and halve in size")
            lat = lat + up
        merged[k] = lat
        top = lat
    if smooths is None:
        return merged
    return [s(m) for s, m in zip(smooths, merged)]


class Trunk(nn.Module):
    def __init__(self, channels: Sequence[int] = (16, 32, 64, 64), in_channels: int = 3) -> None:
        super().__init__()
        stages = []
        c_prev = in_channels
        for c in channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(c_prev, c, 3, stride=2, padding=1),
                    nn.ReLU(),
                    nn.Conv2d(c, c, 3, padding=1),
                    nn.ReLU(),
                )
            )
            c_prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x: Tensor) -> list[Tensor]:
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


class Pyramid(nn.Module):
    def __init__(self, in_channels: Sequence[int], out_channels: int) -> None:
        super().__init__()
        self.laterals = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.smooths = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels)

    def forward(self, trunk_outputs: Sequence[Tensor]) -> list[Tensor]:
        return pyramid_forward(trunk_outputs, self.laterals, self.smooths)


class Backbone(nn.Module):
    """Trunk stages 2..N feed the pyramid; stage s has stride 2**s."""

    def __init__(
        self,
        trunk_channels: Sequence[int] = (16, 32, 64, 64),
        pyramid_channels: int = 32,
        pyramid_stages: Sequence[int] = (2, 3, 4),
    ) -> None:
        super().__init__()
        if len(pyramid_stages) < 1 or max(pyramid_stages) > len(trunk_channels) or min(pyramid_stages) < 1:
            raise ConfigurationError("pyramid stages must index trunk stages (1-based)")
        self.trunk = Trunk(trunk_channels)
        self.pyramid_stages = list(pyramid_stages)
        self.pyramid = Pyramid([trunk_channels[s - 1] for s in pyramid_stages], pyramid_channels)

    @property
    def strides(self) -> list[int]:
        return [2**s for s in self.pyramid_stages]

    def forward(self, images: Tensor) -> FeatureMaps:
        """``images``: (B, 3, H, W) with values in [0, 255]."""
        x = images.to(torch.float32) / 255.0 - 0.5
        stages = self.trunk(x)
        maps = self.pyramid([stages[s - 1] for s in self.pyramid_stages])
        return FeatureMaps(list(self.pyramid_stages), maps, self.strides)
