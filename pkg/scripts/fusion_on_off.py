"""Map size and accuracy of one scenario with fusion ON and OFF."""

import argparse

from densemap.config import load_config
from densemap.pipeline import run_scenario
from densemap.world import load_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", nargs="?", default="scenarios/room_revisit.yaml")
    ap.add_argument("config", nargs="?")
    args = ap.parse_args()
    sc = load_scenario(args.scenario)
    rows = {}
    for flag in (False, True):
        cfg = load_config(args.config)
        cfg.fusion_enabled = flag
        rows[flag] = run_scenario(sc, cfg)
    off = rows[False]
    print(f"{'fusion':<8}{'blocks':>8}{'size':>8}{'rmse':>10}{'rel':>8}{'submaps':>9}{'fusions':>9}")
    for flag, r in rows.items():
        print(f"{'on' if flag else 'off':<8}{r.total_blocks():>8}"
              f"{r.total_blocks() / off.total_blocks():>8.1%}{r.rmse:>10.5f}"
              f"{r.rmse / off.rmse if off.rmse else 0:>8.2f}{len(r.collection):>9}{len(r.fusions):>9}")


if __name__ == "__main__":
    main()
