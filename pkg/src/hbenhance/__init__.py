"""Harmonic-dense recursive image enhancement with task-driven training."""

from .architecture import (
    HBlockSpec,
    NetworkSpec,
    bottleneck_channels,
    build_hblock,
    build_network,
    channel_width,
    count_flops,
    count_macs,
    count_params,
    harmonic_inputs,
    peak_activation_memory,
    reference_cost,
)
from .metrics import psnr, ssim
from .network import EnhanceNet

__all__ = [
    "EnhanceNet",
    "HBlockSpec",
    "NetworkSpec",
    "bottleneck_channels",
    "build_hblock",
    "build_network",
    "channel_width",
    "count_flops",
    "count_macs",
    "count_params",
    "harmonic_inputs",
    "peak_activation_memory",
    "psnr",
    "ssim",
    "reference_cost",
]
__version__ = "0.1.0"
