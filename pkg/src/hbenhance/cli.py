"""``hbenhance`` command line: synth, toy-data, pretrain-head, train, evaluate, enhance, analyze, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Relative output
directories resolve against ``$HBENHANCE_OUT`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("hbenhance")

DEFAULTS = {
    "variant": "layers33",
    "recursion_T": 3,
    "seed": 0,
    "training": {},
    "objective": {},
    "synth": {},
    "head": {"steps": 2000, "scenes": 2000, "threshold": 0.95},
    "ablation": {"seeds": 3, "max_steps": 150},
}


def _out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get("HBENHANCE_OUT")
    return p if p.is_absolute() or not root else Path(root) / p


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def resolve_config(args, flag_overrides: dict) -> dict:
    """defaults <- config file <- command-line flags."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if getattr(args, "config", None):
        cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
    return _merge(cfg, {k: v for k, v in flag_overrides.items() if v is not None})


def _record(run_dir: Path, cfg: dict, argv) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run_config.json").write_text(json.dumps({"argv": list(argv), "config": cfg}, indent=2, sort_keys=True))


def cmd_synth(args, argv) -> int:
    from .weather import SynthConfig, build_paired_dataset

    cfg = resolve_config(args, {"seed": args.seed})
    out = _out_path(args.out_dir)
    manifest = build_paired_dataset(args.clean_dir, out, SynthConfig.from_dict(cfg["synth"]), cfg["seed"])
    _record(out, cfg, argv)
    print(f"wrote {len(manifest.records)} degraded images, manifest {out / 'manifest.jsonl'}")
    if manifest.skipped:
        print(f"skipped {len(manifest.skipped)} unreadable files: {manifest.skipped}", file=sys.stderr)
    return 0


def cmd_toy_data(args, argv) -> int:
    from .task_head import write_toy_dataset

    out = _out_path(args.out_dir)
    write_toy_dataset(out, args.n_train, args.n_test, args.size, args.seed)
    print(f"wrote toy scenes to {out}")
    return 0


def _pretrain_head(clean_dir, cfg: dict, out: Path):
    from .task_head import pretrain_for_dataset

    h = cfg["head"]
    return pretrain_for_dataset(clean_dir, seed=cfg["seed"], steps=h["steps"], scenes=h["scenes"],
                                threshold=h["threshold"], checkpoint=out)


def cmd_pretrain_head(args, argv) -> int:
    cfg = resolve_config(args, {"seed": args.seed})
    if args.steps is not None:
        cfg["head"]["steps"] = args.steps
    out = _out_path(args.out)
    head = _pretrain_head(args.clean_dir, cfg, out)
    print(f"head clean accuracy {head.clean_accuracy:.4f}, saved {out}")
    return 0


def _manifest_head(manifest, args, cfg, run_dir: Path):
    from .task_head import load_head

    if args.head:
        return load_head(args.head)
    clean_dir = Path(manifest.records[0].clean_path).parent.parent
    return _pretrain_head(clean_dir, cfg, run_dir / "head.ckpt")


def cmd_train(args, argv) -> int:
    from .architecture import build_network
    from .network import EnhanceNet
    from .objective import ObjectiveConfig
    from .trainer import TrainingConfig, evaluate, train
    from .weather import DatasetManifest, derive_seed

    cfg = resolve_config(args, {"variant": args.variant, "seed": args.seed, "recursion_T": args.stages})
    if args.max_steps is not None:
        cfg["training"]["max_steps"] = args.max_steps
    run_dir = _out_path(args.out)
    _record(run_dir, cfg, argv)
    manifest = DatasetManifest.read(args.manifest)
    head = _manifest_head(manifest, args, cfg, run_dir)
    tcfg = TrainingConfig.desk(seed=cfg["seed"], **cfg["training"]) if args.desk else \
        TrainingConfig(seed=cfg["seed"], **cfg["training"])
    ocfg = ObjectiveConfig(**cfg["objective"])
    net = EnhanceNet(build_network(cfg["variant"], recursion_T=cfg["recursion_T"]), seed=derive_seed(cfg["seed"], "init"))
    result = train(manifest, net, head, ocfg, tcfg, run_dir)
    evaluate(result.checkpoint, manifest.split("test"), head, out_dir=run_dir / "eval")
    print(f"trained {result.steps} steps; best checkpoint {result.checkpoint}; log {run_dir / 'runlog.jsonl'}")
    return 0


def cmd_evaluate(args, argv) -> int:
    from .task_head import load_head
    from .trainer import cost_block, evaluate
    from .weather import DatasetManifest

    manifest = DatasetManifest.read(args.manifest)
    head = load_head(args.head) if args.head else None
    report = evaluate(args.checkpoint, manifest.split(args.split), head, out_dir=_out_path(args.out),
                      costs=cost_block())
    print(report.text_table())
    if report.extra:
        print(json.dumps(report.extra, indent=2, sort_keys=True))
    return 0


def cmd_enhance(args, argv) -> int:
    import torch

    from .trainer import load_enhancer
    from .weather import read_image, write_image

    net, _, _ = load_enhancer(args.checkpoint)
    img = read_image(args.image_in)
    x = torch.from_numpy(img.astype("float32")).permute(2, 0, 1)[None]
    with torch.no_grad():
        y = net.enhance(x)[0].permute(1, 2, 0).double().numpy()
    write_image(_out_path(args.image_out), y)
    return 0


def analyze_rows(variant: str, height: int, width: int, stages: int) -> list:
    from .architecture import build_network, count_flops, count_params, reference_cost

    variants = ["layers33", "layers71"] if variant == "all" else [variant]
    rows = []
    for v in variants:
        net = build_network(v, recursion_T=stages)
        t4 = reference_cost(net, height, width)
        rows.append({
            "model": v, "image_size": f"{height}x{width}", "params": count_params(net),
            "params_m": t4["params_m"], "gmacs_per_stage": t4["flops_g"],
            "gflops_all_stages": count_flops(net, height, width, stages) / 1e9, "stages": stages,
        })
    return rows


def cmd_analyze(args, argv) -> int:
    rows = analyze_rows(args.variant, args.height, args.width, args.stages)
    if args.json:
        print(json.dumps(rows, indent=2))
        return 0
    print(f"{'model':<10}{'image size':>12}{'FLOPs (G)':>12}{'params (M)':>12}{'FLOPs x T (G)':>16}")
    for r in rows:
        print(f"{r['model']:<10}{r['image_size']:>12}{r['gmacs_per_stage']:>12.2f}{r['params_m']:>12.4f}"
              f"{r['gflops_all_stages']:>16.2f}")
    print("FLOPs (G): multiply-accumulates of one stage; FLOPs x T: 2 FLOPs per MAC over all stages")
    return 0


def cmd_ablate(args, argv) -> int:
    from .objective import ObjectiveConfig
    from .trainer import AblationConfig, TrainingConfig, ablation_suite, format_ablation
    from .weather import DatasetManifest

    cfg = resolve_config(args, {"variant": args.variant})
    if args.seeds is not None:
        cfg["ablation"]["seeds"] = args.seeds
    if args.max_steps is not None:
        cfg["ablation"]["max_steps"] = args.max_steps
    out = _out_path(args.out)
    _record(out, cfg, argv)
    manifest = DatasetManifest.read(args.manifest)
    head = _manifest_head(manifest, args, cfg, out)
    acfg = AblationConfig(
        variant=cfg["variant"], recursion_T=cfg["recursion_T"], seeds=tuple(range(cfg["ablation"]["seeds"])),
        training=TrainingConfig.desk(**{**cfg["training"], "max_steps": cfg["ablation"]["max_steps"]}),
        objective=ObjectiveConfig(**cfg["objective"]))
    table = ablation_suite(manifest, head, acfg, out)
    print(format_ablation(table))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hbenhance", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="build a paired clean/degraded dataset")
    s.add_argument("clean_dir")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("toy-data", help="write procedural lane-stripe scenes with labels")
    s.add_argument("out_dir")
    s.add_argument("--n-train", type=int, default=200)
    s.add_argument("--n-test", type=int, default=50)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_toy_data)

    s = sub.add_parser("pretrain-head", help="train and freeze the toy task head")
    s.add_argument("clean_dir")
    s.add_argument("out")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_pretrain_head)

    s = sub.add_parser("train", help="jointly train the enhancer against a frozen head")
    s.add_argument("manifest")
    s.add_argument("--variant", choices=["layers33", "layers71"])
    s.add_argument("--task", choices=["toy"], default="toy")
    s.add_argument("--stages", type=int)
    s.add_argument("--head", help="frozen head checkpoint (default: pretrain one)")
    s.add_argument("--out", default="runs/train")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--desk", action="store_true", help="apply desk-scale overrides")
    s.add_argument("--config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="PSNR/SSIM and task accuracy of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("manifest")
    s.add_argument("--split", default="test", choices=["train", "test"])
    s.add_argument("--head")
    s.add_argument("--out", default="runs/eval")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("enhance", help="enhance one image")
    s.add_argument("checkpoint")
    s.add_argument("image_in")
    s.add_argument("image_out")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("analyze", help="parameter and FLOP table")
    s.add_argument("--variant", choices=["layers33", "layers71", "all"], default="all")
    s.add_argument("--height", type=int, default=1024)
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--stages", type=int, default=3)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("ablate", help="four-arm ablation over seeds")
    s.add_argument("manifest")
    s.add_argument("--seeds", type=int)
    s.add_argument("--variant", choices=["layers33", "layers71"])
    s.add_argument("--head")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--out", default="runs/ablation")
    s.add_argument("--config")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"hbenhance {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
