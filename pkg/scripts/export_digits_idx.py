"""Write scikit-learn's bundled handwritten digits as an IDX image/label pair."""

import argparse

from fedprune.data import export_digits_idx


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", nargs="?", default="data")
    args = parser.parse_args()
    images, labels = export_digits_idx(args.out_dir)
    print(images)
    print(labels)


if __name__ == "__main__":
    main()
