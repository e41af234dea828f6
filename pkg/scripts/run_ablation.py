"""Four-arm ablation on the toy task: head alone, untrained enhancer, joint training with and without FIE."""

import argparse
import logging
from pathlib import Path

from hbenhance.objective import ObjectiveConfig
from hbenhance.task_head import load_head, pretrain_for_dataset, write_toy_dataset
from hbenhance.trainer import AblationConfig, TrainingConfig, ablation_suite, format_ablation
from hbenhance.weather import SynthConfig, build_paired_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--beta", type=float, default=0.1)
    ap.add_argument("--head", help="reuse a pretrained head checkpoint")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    toy = write_toy_dataset(out / "toy", 200, 50, 64, 0)
    manifest = build_paired_dataset(toy, out / "synth", SynthConfig(), 0)
    head = load_head(args.head) if args.head else pretrain_for_dataset(toy, checkpoint=out / "head.ckpt")
    cfg = AblationConfig(seeds=tuple(range(args.seeds)), training=TrainingConfig.desk(max_steps=args.steps),
                         objective=ObjectiveConfig(beta_fi=args.beta))
    print(format_ablation(ablation_suite(manifest, head, cfg, out / "arms")))


if __name__ == "__main__":
    main()
