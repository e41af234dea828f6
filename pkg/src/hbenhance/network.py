"""Torch realisation of :mod:`hbenhance.architecture`."""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import torch
from torch import nn

from .architecture import ConvSpec, HBlockGraph, NetworkSpec, stage_convs


class ConvUnit(nn.Module):
    """Conv (+ BatchNorm) (+ ReLU) described by a :class:`ConvSpec`."""

    def __init__(self, spec: ConvSpec):
        super().__init__()
        self.spec = spec
        self.conv = nn.Conv2d(spec.c_in, spec.c_out, spec.kernel, spec.stride,
                              padding=spec.kernel // 2, groups=spec.groups, bias=True)
        self.bn = nn.BatchNorm2d(spec.c_out) if spec.norm else None
        self.act = spec.act

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        if self.act:
            x = torch.relu(x)
        return x


class HBlock(nn.Module):
    def __init__(self, graph: HBlockGraph):
        super().__init__()
        self.graph = graph
        self.layers = nn.ModuleList(
            nn.Sequential(*[ConvUnit(c) for c in layer.convs]) for layer in graph.layers
        )
        self.transition = ConvUnit(graph.transition)

    def forward(self, x):
        outs = [x]
        for node, layer in zip(self.graph.layers, self.layers):
            src = [outs[i] for i in node.input_indices]
            inp = src[0] if len(src) == 1 else torch.cat(src, dim=1)
            outs.append(layer(inp))
        cat = torch.cat([outs[i] for i in self.graph.concat_sources], dim=1)
        return self.transition(cat)


class EnhanceStage(nn.Module):
    """One recursion stage: ``concat(bad, prev) -> ... -> 3-channel image``."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        items = stage_convs(spec)
        self.stem = ConvUnit(items[0][1])
        self.blocks = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.tails = nn.ModuleList()
        for i in range(len(spec.block_depths)):
            self.blocks.append(HBlock(items[1 + 3 * i][1]))
            self.fuse.append(ConvUnit(items[2 + 3 * i][1]))
            self.tails.append(ConvUnit(items[3 + 3 * i][1]))

    def forward(self, bad, prev) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(image, last_features)``; the latter is the 32-channel map fed to the output conv."""
        trunk = self.stem(torch.cat([bad, prev], dim=1))
        feat = trunk
        for block, fuse, tail in zip(self.blocks, self.fuse, self.tails):
            h = block(trunk)
            feat = trunk + fuse(torch.cat([trunk, h], dim=1))
            trunk = tail(feat)
        return trunk, feat


class EnhanceNet(nn.Module):
    def __init__(self, spec: NetworkSpec, seed: Optional[int] = 0):
        super().__init__()
        self.spec = spec
        self.stage = EnhanceStage(spec)
        if seed is not None:
            init_weights(self, seed)

    def forward_with_features(self, bad, stages: Optional[int] = None):
        """Outputs of every stage plus the final stage's last feature map."""
        if bad.shape[1] != self.spec.image_channels:
            raise ValueError(f"expected {self.spec.image_channels} input channels, got {bad.shape[1]}")
        T = self.spec.recursion_T if stages is None else stages
        prev = bad
        outputs: List[torch.Tensor] = []
        feat = None
        for _ in range(T):
            prev, feat = self.stage(bad, prev)
            outputs.append(prev)
        return outputs, feat

    def forward(self, bad, stages: Optional[int] = None) -> List[torch.Tensor]:
        return self.forward_with_features(bad, stages)[0]

    @torch.no_grad()
    def enhance(self, bad) -> torch.Tensor:
        """Final-stage output clamped to [0, 1]."""
        return self(bad)[-1].clamp(0.0, 1.0)


def init_weights(module: nn.Module, seed: int) -> None:
    """Fan-in scaled normal weights, zero biases, identity BatchNorm; deterministic in ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                w = torch.randn(m.weight.shape, generator=gen, dtype=torch.float64)
                m.weight.copy_(w * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def zero_parameters(module: nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def torch_param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
