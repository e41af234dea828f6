"""Frozen high-level task heads.

The trainer only talks to :class:`TaskHead`: ``forward`` returns the
prediction and the last feature map, ``loss`` gives the per-sample task
loss. :class:`ToyLaneHead` is the bundled stand-in, trained on procedurally
generated lane-stripe scenes (stripe count class plus a lateral offset).
"""

from __future__ import annotations

import abc
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch import nn

from .checkpoint import load_checkpoint, load_module_tensors, module_tensors, save_checkpoint
from .weather import _rng, derive_seed, write_image

log = logging.getLogger(__name__)

NUM_CLASSES = 3


class TaskLabelError(ValueError):
    pass


class HeadNotReady(RuntimeError):
    pass


class HeadTrainingError(RuntimeError):
    pass


class TaskHead(nn.Module, abc.ABC):
    """Interface every perception network plugged into the trainer must satisfy."""

    @abc.abstractmethod
    def forward(self, image: torch.Tensor) -> Tuple[Dict[str, torch.Tensor], torch.Tensor]:
        """``image`` is ``B x 3 x H x W``; returns ``(prediction, last_feature_map)``."""

    @abc.abstractmethod
    def loss(self, prediction: Dict[str, torch.Tensor], label: Dict[str, torch.Tensor]) -> torch.Tensor:
        """Per-sample task loss, shape ``(B,)``."""

    @abc.abstractmethod
    def descriptor(self, height: int, width: int) -> dict:
        """Prediction type, loss type and last-feature shape for an input size."""

    def freeze(self) -> "TaskHead":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def train(self, mode: bool = True):
        # a frozen head stays in eval mode whatever the caller asks for
        return super().train(False if getattr(self, "frozen", False) else mode)


class ToyLaneHead(TaskHead):
    """Four 3x3 stride-2 convs, global average pool, class and offset branches."""

    def __init__(self, channels: Sequence[int] = (16, 32, 32, 32), seed: int = 0):
        super().__init__()
        layers = []
        c_in = 3
        for c in channels:
            layers.append(nn.Sequential(nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.BatchNorm2d(c), nn.ReLU()))
            c_in = c
        self.features = nn.Sequential(*layers)
        self.cls = nn.Linear(c_in, NUM_CLASSES)
        self.reg = nn.Linear(c_in, 1)
        self.channels = tuple(channels)
        self.loaded = True
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, generator=gen)
                nn.init.zeros_(m.bias)

    def forward(self, image):
        if not self.loaded:
            raise HeadNotReady("head weights are not loaded")
        if image.shape[1] != 3:
            raise TaskLabelError(f"head expects 3-channel input, got {image.shape[1]}")
        f = self.features(image)
        pooled = f.mean(dim=(2, 3))
        return {"logits": self.cls(pooled), "offset": self.reg(pooled)[:, 0]}, f

    def loss(self, prediction, label):
        return head_loss(prediction, label)

    def descriptor(self, height: int = 64, width: int = 64) -> dict:
        h, w = height, width
        for _ in self.channels:
            h, w = math.ceil(h / 2), math.ceil(w / 2)
        return {
            "prediction": {"logits": NUM_CLASSES, "offset": 1},
            "loss": "cross_entropy+squared_error",
            "last_feature_shape": [self.channels[-1], h, w],
            "channels": list(self.channels),
        }


def head_loss(prediction: Dict[str, torch.Tensor], label: Dict[str, torch.Tensor]) -> torch.Tensor:
    """Cross-entropy on the stripe-count class plus squared offset error, per sample."""
    if not isinstance(prediction, dict) or not {"logits", "offset"} <= set(prediction):
        raise TaskLabelError("prediction must carry 'logits' and 'offset'")
    if not isinstance(label, dict) or not {"cls", "offset"} <= set(label):
        raise TaskLabelError("label must carry 'cls' and 'offset'")
    cls = torch.as_tensor(label["cls"])
    if cls.dtype not in (torch.int64, torch.int32):
        raise TaskLabelError("class label must be integer")
    offset = torch.as_tensor(label["offset"], dtype=prediction["offset"].dtype)
    ce = F.cross_entropy(prediction["logits"], cls.long(), reduction="none")
    return ce + (prediction["offset"] - offset) ** 2


def head_forward(head: TaskHead, image: torch.Tensor):
    return head(image)


# ---------------------------------------------------------------------------
# toy scenes


@dataclass
class ToyScene:
    image: np.ndarray
    count: int
    offset: float

    @property
    def label(self) -> dict:
        return {"count": self.count, "offset": self.offset}


def make_toy_scene(seed: int, size: int = 64) -> ToyScene:
    """Textured road background with 1-3 bright slanted lane stripes.

    The offset target is the mean stripe position at the bottom row,
    scaled to [-1, 1].
    """
    rng = _rng(seed)
    noise = gaussian_filter(rng.normal(0, 1, (size, size)), 3.0)
    noise = noise / (np.abs(noise).max() + 1e-12)
    base = rng.uniform(0.15, 0.35)
    tint = rng.uniform(-0.04, 0.04, 3)
    img = np.clip(base + 0.08 * noise[:, :, None] + tint[None, None, :], 0, 1)
    count = int(rng.integers(1, NUM_CLASSES + 1))
    slots = np.sort(rng.choice(np.arange(1, 8), size=count, replace=False))
    xs = slots * size / 8.0 + rng.uniform(-2, 2, count)
    slant = rng.uniform(-0.25, 0.25)
    ys, xx = np.mgrid[0:size, 0:size]
    for x_bottom in xs:
        # stripe centre line: x = x_bottom + slant * (size - 1 - y)
        centre = x_bottom + slant * (size - 1 - ys)
        m = np.clip(1.6 - np.abs(xx + 0.5 - centre), 0, 1)
        bright = rng.uniform(0.9, 1.0)
        img = img * (1 - m[:, :, None]) + bright * m[:, :, None]
    offset = float(np.mean(xs) / size * 2 - 1)
    return ToyScene(np.clip(img, 0, 1), count, offset)


def write_toy_dataset(out_dir, n_train: int = 200, n_test: int = 50, size: int = 64, seed: int = 0) -> Path:
    """Write ``train/`` and ``test/`` PNGs plus ``labels.jsonl``; returns ``out_dir``."""
    out_dir = Path(out_dir)
    lines = []
    for split, n in (("train", n_train), ("test", n_test)):
        for i in range(n):
            scene = make_toy_scene(derive_seed(seed, "toy", split, i), size)
            rel = f"{split}/scene_{i:04d}.png"
            write_image(out_dir / rel, scene.image)
            lines.append(json.dumps({"file": rel, "label": scene.label}, sort_keys=True))
    (out_dir / "labels.jsonl").write_text("\n".join(lines) + "\n")
    return out_dir


def labels_to_tensors(labels: Sequence[dict]) -> Dict[str, torch.Tensor]:
    return {
        "cls": torch.tensor([int(l["count"]) - 1 for l in labels], dtype=torch.int64),
        "offset": torch.tensor([float(l["offset"]) for l in labels], dtype=torch.float32),
    }


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.asarray(i, dtype=np.float32) for i in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def head_accuracy(head: TaskHead, images: torch.Tensor, labels: Dict[str, torch.Tensor], batch: int = 64) -> float:
    head.eval()
    hits = 0
    for i in range(0, len(images), batch):
        pred, _ = head(images[i:i + batch])
        hits += int((pred["logits"].argmax(1) == labels["cls"][i:i + batch]).sum())
    return hits / len(images)


def pretrain_toy_head(train_images: torch.Tensor, train_labels: Dict[str, torch.Tensor],
                      test_images: torch.Tensor, test_labels: Dict[str, torch.Tensor],
                      seed: int = 0, steps: int = 2000, batch_size: int = 32, lr: float = 1e-3,
                      threshold: float = 0.95, checkpoint: Optional[Path] = None) -> ToyLaneHead:
    """Train on clean scenes, check held-out accuracy against ``threshold`` and freeze."""
    torch.manual_seed(seed)
    head = ToyLaneHead(seed=seed)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    gen = torch.Generator().manual_seed(seed)
    n = len(train_images)
    head.train()
    for step in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        x = train_images[idx]
        if torch.rand((), generator=gen) < 0.5:
            # mirror augmentation: the offset flips sign
            x = x.flip(3)
            lab = {"cls": train_labels["cls"][idx], "offset": -train_labels["offset"][idx]}
        else:
            lab = {"cls": train_labels["cls"][idx], "offset": train_labels["offset"][idx]}
        pred, _ = head(x)
        loss = head_loss(pred, lab).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    acc = head_accuracy(head, test_images, test_labels)
    log.info("toy head clean held-out accuracy %.4f after %d steps", acc, steps)
    if acc < threshold:
        raise HeadTrainingError(
            f"toy head reached {acc:.4f} held-out accuracy, below the {threshold} gate "
            f"(seed={seed}, steps={steps}, batch={batch_size}, lr={lr})")
    head.freeze()
    head.clean_accuracy = acc
    if checkpoint is not None:
        save_head(head, checkpoint, extra={"clean_accuracy": acc, "seed": seed, "steps": steps})
    return head


def save_head(head: ToyLaneHead, path, extra: Optional[dict] = None) -> None:
    arch = {"kind": "toy_lane_head", "channels": list(head.channels), "descriptor": head.descriptor(64, 64)}
    save_checkpoint(path, module_tensors(head), arch, extra)


def load_head(path) -> ToyLaneHead:
    tensors, arch, extra = load_checkpoint(path)
    if arch.get("kind") != "toy_lane_head":
        raise HeadNotReady(f"{path} is not a toy head checkpoint")
    head = ToyLaneHead(arch["channels"])
    load_module_tensors(head, tensors)
    head.freeze()
    head.clean_accuracy = extra.get("clean_accuracy")
    return head


def load_split(clean_dir, split: str) -> Tuple[List[np.ndarray], List[dict]]:
    from .weather import read_image

    clean_dir = Path(clean_dir)
    labels = {}
    for line in (clean_dir / "labels.jsonl").read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            labels[rec["file"]] = rec["label"]
    files = sorted(k for k in labels if k.startswith(split + "/"))
    return [read_image(clean_dir / f) for f in files], [labels[f] for f in files]


def pretrain_for_dataset(clean_dir, seed: int = 0, steps: int = 2000, scenes: int = 2000,
                         threshold: float = 0.95, checkpoint: Optional[Path] = None) -> ToyLaneHead:
    """Pretrain on freshly generated scenes; gate on the dataset's clean ``test/`` split."""
    pool = [make_toy_scene(derive_seed(seed, "head-pretrain", i)) for i in range(scenes)]
    test_imgs, test_labels = load_split(clean_dir, "test")
    return pretrain_toy_head(
        images_to_tensor([s.image for s in pool]), labels_to_tensors([s.label for s in pool]),
        images_to_tensor(test_imgs), labels_to_tensors(test_labels),
        seed=seed, steps=steps, threshold=threshold, checkpoint=checkpoint)
