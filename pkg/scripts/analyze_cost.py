"""Parameter, FLOP and activation-memory table for both variants."""

import argparse

from hbenhance.architecture import build_network, count_flops, count_params, peak_activation_memory, reference_cost


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--height", type=int, default=1024)
    ap.add_argument("--width", type=int, default=512)
    ap.add_argument("--stages", type=int, default=3)
    args = ap.parse_args()
    h, w = args.height, args.width
    print(f"{'model':<10}{'params':>10}{'GMAC/stage':>12}{'GFLOP x T':>12}{'peak MiB':>10}{'dense MiB':>11}")
    for v in ("layers33", "layers71"):
        net = build_network(v, recursion_T=args.stages)
        peak, _ = peak_activation_memory(net, h, w)
        dense, _ = peak_activation_memory(net, h, w, wiring="dense")
        print(f"{v:<10}{count_params(net):>10}{reference_cost(net, h, w)['flops_g']:>12.2f}"
              f"{count_flops(net, h, w) / 1e9:>12.2f}{peak / 2 ** 20:>10.1f}{dense / 2 ** 20:>11.1f}")


if __name__ == "__main__":
    main()
