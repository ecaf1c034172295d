"""Surface error with exact poses, with drift plus loop-closure re-posing, and the naive single volume."""

import argparse
import dataclasses

from densemap.config import load_config
from densemap.pipeline import run_scenario
from densemap.world import DriftModel, load_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", nargs="?", default="scenarios/room_drift.yaml")
    ap.add_argument("config", nargs="?")
    args = ap.parse_args()
    sc = load_scenario(args.scenario)
    exact = dataclasses.replace(sc, drift=DriftModel(loop_closures=sc.drift.loop_closures))
    runs = [("exact poses", exact, False), ("submaps + re-posing", sc, False), ("naive volume", sc, True)]
    results = []
    for name, scenario, naive in runs:
        cfg = load_config(args.config)
        cfg.naive = naive
        results.append((name, run_scenario(scenario, cfg)))
    base = results[0][1].rmse
    print(f"{'run':<22}{'rmse':>10}{'median':>10}{'vs exact':>10}")
    for name, r in results:
        print(f"{name:<22}{r.rmse:>10.5f}{r.median:>10.5f}{r.rmse / base if base else 0:>10.0%}")


if __name__ == "__main__":
    main()
