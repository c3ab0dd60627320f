"""Parameter and multiply-accumulate counts of the reference CNN and its sub-models."""

import argparse

from fedprune.federation import model_size_summary
from fedprune.nn import reference_cnn


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--classes", type=int, default=62)
    parser.add_argument("--drop-rates", type=float, nargs="+", default=[0.25, 0.5, 0.75])
    args = parser.parse_args()
    spec = reference_cnn(args.classes)
    print("drop_rate,full_params,sub_params,full_flops,sub_flops,flop_ratio")
    for k in args.drop_rates:
        s = model_size_summary(spec, k)
        print(f"{k},{s['full_params']},{s['sub_params']},{s['full_flops']},{s['sub_flops']},"
              f"{s['full_flops'] / s['sub_flops']:.3f}")


if __name__ == "__main__":
    main()
