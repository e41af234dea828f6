"""Feature identity extraction: small conv stack + fixed random projection onto the 128-d unit sphere."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Dict, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .weather import derive_seed

TARGET_DIM = 128
NORM_FLOOR = 1e-8

_checks_enabled = True


@contextmanager
def contract_checks(enabled: bool):
    """Toggle the unit-norm check; it reads tensor values, which ``torch.func`` transforms forbid."""
    global _checks_enabled
    prev, _checks_enabled = _checks_enabled, enabled
    try:
        yield
    finally:
        _checks_enabled = prev


class IdentityContractError(ValueError):
    pass


def projection_matrix(seed: int, flatten_dim: int, target_dim: int = TARGET_DIM) -> np.ndarray:
    """``flatten_dim x target_dim`` matrix, i.i.d. N(0, 1/flatten_dim), reproducible from ``seed``."""
    rng = np.random.default_rng(np.uint64(derive_seed(seed, "fie-projection", flatten_dim, target_dim)))
    return rng.normal(0.0, 1.0 / np.sqrt(flatten_dim), size=(flatten_dim, target_dim)).astype(np.float32)


class IdentityProjector(nn.Module):
    """Three 3x3 stride-2 convs (ReLU) -> flatten -> fixed projection -> L2 normalisation.

    The conv stack is shared by both branches; when branches differ in
    channel count each count gets its own first conv. Projections are
    buffers keyed by flatten size, so the optimizer never sees them.
    """

    def __init__(self, in_channels: Sequence[int] | int = 32, channels: Sequence[int] = (32, 64, 64),
                 target_dim: int = TARGET_DIM, seed: int = 0):
        super().__init__()
        if isinstance(in_channels, int):
            in_channels = [in_channels]
        self.seed = int(seed)
        self.target_dim = target_dim
        self.channels = tuple(channels)
        self.heads = nn.ModuleDict({
            str(c): nn.Conv2d(c, channels[0], 3, stride=2, padding=1) for c in sorted(set(in_channels))
        })
        self.body = nn.ModuleList(
            nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(channels[:-1], channels[1:])
        )
        self._proj_dims: list[int] = []
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "fie-convs") % 2 ** 63)
        for conv in [*self.heads.values(), *self.body]:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu", generator=gen)
            nn.init.zeros_(conv.bias)

    @property
    def in_channels(self) -> list[int]:
        return sorted(int(k) for k in self.heads.keys())

    @property
    def projection_dims(self) -> list[int]:
        return sorted(self._proj_dims)

    def projection(self, flatten_dim: int) -> torch.Tensor:
        name = f"proj_{flatten_dim}"
        if flatten_dim not in self._proj_dims:
            ref = next(self.parameters())
            mat = torch.from_numpy(projection_matrix(self.seed, flatten_dim, self.target_dim))
            self.register_buffer(name, mat.to(dtype=ref.dtype, device=ref.device))
            self._proj_dims.append(flatten_dim)
        return getattr(self, name)

    def ensure_projections(self, dims: Iterable[int]) -> None:
        for d in dims:
            self.projection(int(d))

    def features(self, fmap: torch.Tensor) -> torch.Tensor:
        key = str(fmap.shape[1])
        if key not in self.heads:
            raise IdentityContractError(f"no input conv for {fmap.shape[1]} channels (have {self.in_channels})")
        h = torch.relu(self.heads[key](fmap))
        for conv in self.body:
            h = torch.relu(conv(h))
        return h.flatten(1)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        flat = self.features(fmap)
        v = flat @ self.projection(flat.shape[1])
        return v / v.norm(dim=1, keepdim=True).clamp_min(NORM_FLOOR)


def fie_forward(feature_map: torch.Tensor, projector: IdentityProjector) -> torch.Tensor:
    return projector(feature_map)


def feature_identity_loss(z_en: torch.Tensor, z_ht: torch.Tensor, tol: float = 1e-3) -> torch.Tensor:
    """Per-sample squared distance between unit identity vectors, in [0, 4]."""
    z_en = torch.as_tensor(z_en)
    z_ht = torch.as_tensor(z_ht)
    if z_en.shape != z_ht.shape:
        raise IdentityContractError(f"shape mismatch {tuple(z_en.shape)} vs {tuple(z_ht.shape)}")
    for name, z in (("z_en", z_en), ("z_ht", z_ht)) if _checks_enabled else ():
        dev = (z.detach().norm(dim=-1) - 1.0).abs().max().item()
        if dev > tol:
            raise IdentityContractError(f"{name} is not unit norm (deviation {dev:.3g})")
    return ((z_en - z_ht) ** 2).sum(dim=-1)


def projector_state(projector: IdentityProjector) -> Dict[str, object]:
    return {"seed": projector.seed, "in_channels": projector.in_channels, "channels": list(projector.channels),
            "target_dim": projector.target_dim, "projection_dims": projector.projection_dims}


def projector_from_state(state: Dict[str, object]) -> IdentityProjector:
    p = IdentityProjector(state["in_channels"], state["channels"], state["target_dim"], state["seed"])
    p.ensure_projections(state["projection_dims"])
    return p
