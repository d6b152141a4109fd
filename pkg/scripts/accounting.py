"""Print FLOPs (MACs on the fused graph) and parameters for every Finet variant and group count."""
import argparse

from finegrain.finet import build_finet, count_flops, count_params, fc_params
from finegrain.norm import GroupSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--groups", default="1,2,4,8")
    ap.add_argument("--cifar", action="store_true", help="32x32 input form")
    args = ap.parse_args()
    print(f"{'variant':<8} {'se':<5} {'G':>3} {'MFLOPs':>9} {'Mparams':>9}")
    for variant in ("small", "large"):
        for se in (False, True):
            for g in (int(v) for v in args.groups.split(",")):
                net = build_finet(variant, GroupSpec.fixed_groups(g), use_se=se, cifar_adapted=args.cifar,
                                  num_classes=10 if args.cifar else 1000)
                print(f"{variant:<8} {str(se):<5} {g:>3} {count_flops(net) / 1e6:>9.2f} {count_params(net) / 1e6:>9.3f}")
    print(f"fc1+fc2 params: {fc_params(build_finet('small')) / 1e6:.3f}M")


if __name__ == "__main__":
    main()
