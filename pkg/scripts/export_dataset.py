"""Write a synthetic scenario to the on-disk dataset layout (depth, TUM poses, observations, loop tables)."""

import argparse

from densemap.pipeline import export_dataset
from densemap.world import load_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario")
    ap.add_argument("output")
    ap.add_argument("--max-frames", type=int)
    args = ap.parse_args()
    root = export_dataset(load_scenario(args.scenario), args.output, args.max_frames)
    print(root)


if __name__ == "__main__":
    main()
