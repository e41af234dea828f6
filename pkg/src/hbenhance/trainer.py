"""Joint optimisation of the enhancer and identity projector against a frozen task head."""

from __future__ import annotations

import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .architecture import NetworkSpec, build_network, reference_cost
from .checkpoint import CheckpointError, load_checkpoint, load_module_tensors, module_tensors, save_checkpoint
from .fie import IdentityProjector, projector_from_state, projector_state
from .metrics import ImageResult, QualityReport, emit_report, psnr, ssim
from .network import EnhanceNet
from .objective import ObjectiveConfig, total_objective
from .task_head import TaskHead, head_accuracy, labels_to_tensors
from .weather import DatasetManifest, ManifestRecord, derive_seed, read_image

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: Optional[Path]):
        super().__init__(msg)
        self.last_good = last_good


class EvaluationError(ValueError):
    pass


@dataclass
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    milestones: Sequence[int] = (30, 50, 80)
    lr_divisor: float = 5.0
    adam_betas: Sequence[float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0
    max_steps: Optional[int] = None
    val_fraction: float = 0.1
    crop: Optional[int] = None  # random square crop; None trains on full images

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be ascending")
        if self.milestones and self.milestones[-1] > self.epochs:
            raise ValueError("milestones must lie within the epoch budget")

    @classmethod
    def desk(cls, **overrides) -> "TrainingConfig":
        """Small CPU-friendly run on the 64x64 toy set."""
        base = dict(epochs=10, batch_size=4, learning_rate=1e-3, milestones=(6, 8, 9), max_steps=500)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)


def lr_at_epoch(epoch: int, config: TrainingConfig) -> float:
    """Learning rate during 1-based ``epoch``: divided once per milestone already passed."""
    passed = sum(1 for m in config.milestones if epoch > m)
    return config.learning_rate / config.lr_divisor ** passed


class RunLog:
    """Append-only JSONL stream of step and epoch records."""

    def __init__(self, path: Optional[Path] = None):
        self.records: List[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def steps(self) -> List[dict]:
        return [r for r in self.records if r["kind"] == "step"]

    def epochs(self) -> List[dict]:
        return [r for r in self.records if r["kind"] == "epoch"]

    def loss_sequence(self) -> List[tuple]:
        return [(r["L_R"], r["L_HT"], r["L_FI"], r["total"]) for r in self.steps()]

    @classmethod
    def read(cls, path) -> "RunLog":
        log_ = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                log_.records.append(json.loads(line))
        return log_


# ---------------------------------------------------------------------------
# data


@dataclass
class PairedSet:
    bad: torch.Tensor
    clean: torch.Tensor
    labels: Optional[Dict[str, torch.Tensor]]
    tags: List[str]
    names: List[str]

    def __len__(self):
        return len(self.tags)

    def subset(self, idx) -> "PairedSet":
        idx = list(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        labels = None if self.labels is None else {k: v[t] for k, v in self.labels.items()}
        return PairedSet(self.bad[t], self.clean[t], labels, [self.tags[i] for i in idx], [self.names[i] for i in idx])


def _to_tensor(imgs: List[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(imgs).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def load_pairs(records: Sequence[ManifestRecord]) -> PairedSet:
    if not records:
        raise EvaluationError("no records in split")
    cache: Dict[str, np.ndarray] = {}
    bad, clean = [], []
    for r in records:
        if r.clean_path not in cache:
            cache[r.clean_path] = read_image(r.clean_path)
        clean.append(cache[r.clean_path])
        bad.append(read_image(r.degraded_path))
    have_labels = all(r.label is not None for r in records)
    labels = labels_to_tensors([r.label for r in records]) if have_labels else None
    return PairedSet(_to_tensor(bad), _to_tensor(clean), labels, [r.variant_tag for r in records],
                     [Path(r.degraded_path).name for r in records])


def split_train_val(records: Sequence[ManifestRecord], fraction: float, seed: int):
    """Hold out whole clean images (all four variants) for validation."""
    train, val = [], []
    for r in records:
        u = derive_seed(seed, "val", Path(r.clean_path).name) / 2 ** 64
        (val if u < fraction else train).append(r)
    return train, val


# ---------------------------------------------------------------------------
# checkpoints


def save_enhancer(path, net: EnhanceNet, projector: Optional[IdentityProjector], extra: Optional[dict] = None) -> None:
    tensors = module_tensors(net, "en.")
    meta = dict(extra or {})
    if projector is not None:
        tensors.update(module_tensors(projector, "fie."))
        meta["fie"] = projector_state(projector)
    save_checkpoint(path, tensors, net.spec.to_dict(), meta)


def load_enhancer(path):
    """Returns ``(net, projector_or_None, extra)`` in eval mode."""
    tensors, arch, extra = load_checkpoint(path)
    try:
        spec = NetworkSpec.from_dict(arch)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad architecture record: {exc}") from exc
    net = EnhanceNet(spec, seed=None)
    load_module_tensors(net, tensors, "en.")
    net.eval()
    projector = None
    if "fie" in extra:
        projector = projector_from_state(extra["fie"])
        load_module_tensors(projector, tensors, "fie.")
    return net, projector, extra


@contextmanager
def deterministic(seed: int):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Path
    run_log: RunLog
    net: EnhanceNet
    projector: IdentityProjector
    best_val_psnr: float
    steps: int


def _param_norm_ok(params) -> bool:
    return all(torch.isfinite(p).all() for p in params)


@torch.no_grad()
def enhance_batches(net: EnhanceNet, images: torch.Tensor, batch: int = 16) -> torch.Tensor:
    net.eval()
    outs = [net(images[i:i + batch].contiguous(memory_format=torch.channels_last))[-1].clamp(0, 1)
            for i in range(0, len(images), batch)]
    return torch.cat(outs).contiguous()


def _mean_psnr(pred: torch.Tensor, target: torch.Tensor) -> float:
    p = pred.permute(0, 2, 3, 1).double().numpy()
    t = target.permute(0, 2, 3, 1).double().numpy()
    return float(np.mean([psnr(a, b) for a, b in zip(p, t)]))


def train(manifest: DatasetManifest, net: EnhanceNet, head: Optional[TaskHead], objective: ObjectiveConfig,
          config: TrainingConfig, run_dir, projector: Optional[IdentityProjector] = None,
          data: Optional[PairedSet] = None) -> TrainResult:
    """Optimise ``net`` (and the projector) on the manifest's train split.

    Writes ``runlog.jsonl``, ``best.ckpt`` (highest validation PSNR) and
    ``last.ckpt`` into ``run_dir``. A non-finite loss aborts with
    :class:`TrainingDiverged` pointing at the last good checkpoint.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    objective.validate()
    if head is not None:
        head.freeze()
    if projector is None:
        projector = IdentityProjector(in_channels=sorted({net.spec.base_channels, _head_channels(head)}),
                                      seed=derive_seed(config.seed, "fie"))
    if data is None:
        train_recs, val_recs = split_train_val(manifest.split("train"), config.val_fraction, config.seed)
        data, val = load_pairs(train_recs), load_pairs(val_recs) if val_recs else None
    else:
        val = None
    if objective.alpha > 0 and data.labels is None:
        raise ValueError("alpha > 0 but the manifest carries no task labels")
    params = list(net.parameters()) + list(projector.parameters())
    run_log = RunLog(run_dir / "runlog.jsonl")
    best_path, last_path = run_dir / "best.ckpt", run_dir / "last.ckpt"
    best_psnr = -math.inf
    step = 0
    t0 = time.perf_counter()
    n = len(data)
    cl = torch.channels_last
    net.to(memory_format=cl)
    with deterministic(config.seed):
        # lazily created projections must exist before the optimizer snapshot
        net.train()
        with torch.no_grad():
            _, f_en = net.forward_with_features(data.bad[:1])
            projector(f_en)
            if head is not None:
                projector(head(data.bad[:1])[1])
        opt = torch.optim.Adam(params, lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps)
        save_enhancer(last_path, net, projector, {"epoch": 0})
        done = False
        for epoch in range(1, config.epochs + 1):
            lr = lr_at_epoch(epoch, config)
            for g in opt.param_groups:
                g["lr"] = lr
            order = np.random.default_rng(derive_seed(config.seed, "order", epoch)).permutation(n)
            epoch_terms = []
            net.train()
            for start in range(0, n - config.batch_size + 1, config.batch_size):
                idx = torch.as_tensor(order[start:start + config.batch_size], dtype=torch.long)
                bad, clean = data.bad[idx].contiguous(memory_format=cl), data.clean[idx].contiguous(memory_format=cl)
                if config.crop:
                    bad, clean = _crop(bad, clean, config.crop, derive_seed(config.seed, "crop", step))
                labels = None if data.labels is None else {k: v[idx] for k, v in data.labels.items()}
                terms = total_objective(net, head, projector, bad, clean, labels, objective)
                scalars = terms.scalars()
                if not all(math.isfinite(v) for v in scalars.values()):
                    raise TrainingDiverged(f"non-finite loss at step {step}: {scalars}", last_path)
                opt.zero_grad(set_to_none=True)
                terms.total.backward()
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
                opt.step()
                step += 1
                epoch_terms.append(scalars)
                run_log.append({"kind": "step", "step": step, "epoch": epoch, "lr": lr,
                                "wall_time": round(time.perf_counter() - t0, 3), **scalars})
                if config.max_steps is not None and step >= config.max_steps:
                    done = True
                    break
            if not _param_norm_ok(params):
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", last_path)
            val_psnr = _mean_psnr(enhance_batches(net, val.bad), val.clean) if val is not None else None
            mean_lr = float(np.mean([t["L_R"] for t in epoch_terms])) if epoch_terms else float("nan")
            run_log.append({"kind": "epoch", "epoch": epoch, "steps": len(epoch_terms), "mean_L_R": mean_lr,
                            "mean_total": float(np.mean([t["total"] for t in epoch_terms])) if epoch_terms else None,
                            "val_psnr": val_psnr})
            meta = {"epoch": epoch, "val_psnr": val_psnr, "training": config.to_dict(),
                    "objective": objective.to_dict()}
            save_enhancer(last_path, net, projector, meta)
            score = val_psnr if val_psnr is not None else -mean_lr
            if score > best_psnr:
                best_psnr = score
                save_enhancer(best_path, net, projector, meta)
            if done:
                break
    net.eval()
    return TrainResult(best_path, run_log, net, projector, best_psnr, step)


def _head_channels(head: Optional[TaskHead]) -> int:
    if head is None:
        return 32
    return int(head.descriptor(64, 64)["last_feature_shape"][0])


def _crop(bad, clean, size, seed):
    rng = np.random.default_rng(seed)
    h, w = bad.shape[2:]
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return bad[:, :, y:y + size, x:x + size], clean[:, :, y:y + size, x:x + size]


# ---------------------------------------------------------------------------
# evaluation


def identity_enhancer(images: torch.Tensor) -> torch.Tensor:
    return images


def net_enhancer(net: EnhanceNet) -> Callable[[torch.Tensor], torch.Tensor]:
    return lambda images: enhance_batches(net, images)


def evaluate(enhancer, records: Sequence[ManifestRecord], head: Optional[TaskHead] = None,
             out_dir=None, costs: Optional[dict] = None, data: Optional[PairedSet] = None) -> QualityReport:
    """PSNR/SSIM of the enhanced final stage against clean, plus task accuracy before/after.

    ``enhancer`` is a checkpoint path, an :class:`EnhanceNet`, or any
    callable mapping a ``B x 3 x H x W`` batch to enhanced images.
    """
    if data is None:
        if not records:
            raise EvaluationError("evaluation split is empty")
        data = load_pairs(records)
    if isinstance(enhancer, (str, Path)):
        net, _, _ = load_enhancer(enhancer)
        enhancer = net_enhancer(net)
    elif isinstance(enhancer, EnhanceNet):
        enhancer = net_enhancer(enhancer)
    with torch.no_grad():
        enhanced = enhancer(data.bad).clamp(0, 1)
    e = enhanced.permute(0, 2, 3, 1).double().numpy()
    c = data.clean.permute(0, 2, 3, 1).double().numpy()
    b = data.bad.permute(0, 2, 3, 1).double().numpy()
    results = [ImageResult(name, tag, psnr(x, y), ssim(x, y)) for name, tag, x, y in zip(data.names, data.tags, e, c)]
    extra = {
        "degraded_psnr": float(np.mean([psnr(x, y) for x, y in zip(b, c)])),
        "degraded_ssim": float(np.mean([ssim(x, y) for x, y in zip(b, c)])),
    }
    if head is not None and data.labels is not None:
        extra["task_accuracy_degraded"] = head_accuracy(head, data.bad, data.labels)
        extra["task_accuracy_enhanced"] = head_accuracy(head, enhanced, data.labels)
    return emit_report(results, costs, out_dir, extra)


# ---------------------------------------------------------------------------
# ablation

ARMS = ("a", "b", "c", "d")
ARM_NAMES = {"a": "head on degraded", "b": "+EN (w/o training)", "c": "+EN (training, beta=0)", "d": "+FIE (full)"}


@dataclass
class AblationConfig:
    variant: str = "layers33"
    recursion_T: int = 3
    seeds: Sequence[int] = (0, 1, 2)
    training: TrainingConfig = field(default_factory=lambda: TrainingConfig.desk(max_steps=150))
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)


def ablation_suite(manifest: DatasetManifest, head: TaskHead, config: AblationConfig, out_dir) -> dict:
    """Run arms (a)-(d) over every seed; returns per-arm mean/sd of task accuracy and PSNR."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_recs, _ = split_train_val(manifest.split("train"), config.training.val_fraction, 0)
    train_data = load_pairs(train_recs)
    test_data = load_pairs(manifest.split("test"))
    per_seed: Dict[str, List[dict]] = {a: [] for a in ARMS}
    for seed in config.seeds:
        spec = build_network(config.variant, recursion_T=config.recursion_T)
        base = evaluate(identity_enhancer, [], head, data=test_data)
        per_seed["a"].append({"seed": seed, "accuracy": base.extra["task_accuracy_enhanced"],
                              "psnr": base.overall["psnr"]})
        untrained = EnhanceNet(spec, seed=derive_seed(seed, "init"))
        rep = evaluate(untrained, [], head, data=test_data)
        per_seed["b"].append({"seed": seed, "accuracy": rep.extra["task_accuracy_enhanced"], "psnr": rep.overall["psnr"]})
        for arm, beta in (("c", 0.0), ("d", config.objective.beta_fi)):
            net = EnhanceNet(spec, seed=derive_seed(seed, "init"))
            obj = replace(config.objective, beta_fi=beta)
            tcfg = replace(config.training, seed=seed)
            res = train(manifest, net, head, obj, tcfg, out_dir / f"arm_{arm}_seed{seed}", data=train_data)
            rep = evaluate(res.net, [], head, data=test_data)
            per_seed[arm].append({"seed": seed, "accuracy": rep.extra["task_accuracy_enhanced"],
                                  "psnr": rep.overall["psnr"]})
            log.info("arm %s seed %d: acc %.4f psnr %.3f", arm, seed, per_seed[arm][-1]["accuracy"],
                     per_seed[arm][-1]["psnr"])
    table = {}
    for arm in ARMS:
        acc = np.array([r["accuracy"] for r in per_seed[arm]])
        ps = np.array([r["psnr"] for r in per_seed[arm]])
        table[arm] = {"name": ARM_NAMES[arm], "accuracy_mean": float(acc.mean()), "accuracy_sd": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
                      "psnr_mean": float(ps.mean()), "psnr_sd": float(ps.std(ddof=1)) if len(ps) > 1 else 0.0,
                      "runs": per_seed[arm]}
    (out_dir / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    (out_dir / "ablation.txt").write_text(format_ablation(table) + "\n")
    return table


def format_ablation(table: dict) -> str:
    lines = [f"{'arm':<4}{'model':<26}{'accuracy':>20}{'psnr_db':>20}"]
    for arm in ARMS:
        r = table[arm]
        lines.append(f"{arm:<4}{r['name']:<26}{r['accuracy_mean']:>12.4f} ± {r['accuracy_sd']:<5.3f}"
                     f"{r['psnr_mean']:>12.3f} ± {r['psnr_sd']:<5.3f}")
    return "\n".join(lines)


def cost_block(variants: Sequence[str] = ("layers33", "layers71"), height: int = 1024, width: int = 512) -> dict:
    out = {}
    for v in variants:
        c = reference_cost(build_network(v), height, width)
        out[v] = {"image_size": f"{height}x{width}", **c}
    return out
