"""Recovery, task and feature-identity losses and their weighted sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional

import torch

from .fie import IdentityProjector, feature_identity_loss
from .network import EnhanceNet
from .task_head import TaskHead


class ObjectiveConfigError(ValueError):
    pass


@dataclass
class ObjectiveConfig:
    epsilon: float = 5e-3
    alpha: float = 0.01
    beta_fi: float = 0.1
    recovery_stages: str = "all"  # "all" sums every stage, "final" uses x^T only
    charbonnier: str = "standard"  # "standard": sqrt(d^2 + eps^2); "literal": d^2 + eps^2

    def validate(self) -> None:
        if not self.epsilon > 0:
            raise ObjectiveConfigError("epsilon must be > 0")
        if self.alpha < 0 or self.beta_fi < 0:
            raise ObjectiveConfigError("loss weights must be >= 0")
        if self.recovery_stages not in ("all", "final"):
            raise ObjectiveConfigError(f"unknown recovery_stages {self.recovery_stages!r}")
        if self.charbonnier not in ("standard", "literal"):
            raise ObjectiveConfigError(f"unknown charbonnier form {self.charbonnier!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def charbonnier_per_sample(pred: torch.Tensor, gt: torch.Tensor, epsilon: float = 5e-3,
                           form: str = "standard") -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    d2 = (pred - gt) ** 2
    if form == "standard":
        per = torch.sqrt(d2 + epsilon ** 2)
    elif form == "literal":
        per = d2 + epsilon ** 2
    else:
        raise ObjectiveConfigError(f"unknown charbonnier form {form!r}")
    return per.flatten(1).mean(dim=1)


def charbonnier_loss(pred, gt, epsilon: float = 5e-3, form: str = "standard") -> torch.Tensor:
    """Mean of ``sqrt((pred - gt)^2 + eps^2)`` over all elements."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return charbonnier_per_sample(pred.reshape(1, -1), gt.reshape(1, -1), epsilon, form)[0]


@dataclass
class ObjectiveTerms:
    total: torch.Tensor
    recovery: torch.Tensor
    task: torch.Tensor
    identity: torch.Tensor
    per_sample: torch.Tensor
    outputs: list

    def scalars(self) -> Dict[str, float]:
        return {"L_R": self.recovery.item(), "L_HT": self.task.item(), "L_FI": self.identity.item(),
                "total": self.total.item()}


def total_objective(net: EnhanceNet, head: Optional[TaskHead], projector: Optional[IdentityProjector],
                    bad: torch.Tensor, clean: torch.Tensor, labels: Optional[dict],
                    config: ObjectiveConfig) -> ObjectiveTerms:
    """Batch mean of ``sum_t L_R(x^t) + alpha * L_HT(x^T) + beta * L_FI(x^T)``.

    The task head sees the final stage output; its last feature map and the
    enhancer's last feature map go through the shared projector. Gradients
    reach the enhancer and projector parameters only; the head is frozen.
    """
    config.validate()
    if config.alpha > 0 and labels is None:
        raise ObjectiveConfigError("alpha > 0 requires task labels")
    if (config.alpha > 0 or config.beta_fi > 0) and head is None:
        raise ObjectiveConfigError("task or identity loss requested without a task head")
    if config.beta_fi > 0 and projector is None:
        raise ObjectiveConfigError("beta_fi > 0 requires an identity projector")
    outputs, feat_en = net.forward_with_features(bad)
    stages = outputs if config.recovery_stages == "all" else outputs[-1:]
    rec = sum(charbonnier_per_sample(x, clean, config.epsilon, config.charbonnier) for x in stages)
    zero = torch.zeros_like(rec)
    task, ident = zero, zero
    if head is not None:
        # terms are evaluated (and logged) even at zero weight
        pred, feat_ht = head(outputs[-1])
        if labels is not None:
            task = head.loss(pred, labels)
        if projector is not None:
            ident = feature_identity_loss(projector(feat_en), projector(feat_ht))
    per = rec + config.alpha * task + config.beta_fi * ident
    return ObjectiveTerms(per.mean(), rec.mean(), task.mean(), ident.mean(), per, outputs)
