"""Heat benchmark: learned versus intrusive ROM over the 10x10 test grid.

Usage: python scripts/run_heat.py [--out results/heat]
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from popinf.cli import load_param_file
from popinf.dataset import SnapshotSet
from popinf.fom import HeatConfig, heat_full_operators, heat_solve, heat_structure
from popinf.pipeline import TrainConfig, evaluate, train
from popinf.rom import intrusive_rom

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/heat")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    doc = json.loads((CONFIGS / "heat_train.json").read_text())
    config = HeatConfig(**doc["solver"])
    train_params = load_param_file(CONFIGS / "heat_train.json")
    test_params = load_param_file(CONFIGS / "heat_test.json")
    structure = heat_structure()

    start = time.perf_counter()
    snaps = SnapshotSet(train_params,
                        [heat_solve(config, mu).states for mu in train_params],
                        config.time, ("u",), ("alpha", "beta"))
    result = train(structure, snaps, TrainConfig(
        energy=1e-10, scheme="imex_euler", dt=None, derivatives="backward"))
    rom = result.rom
    print(f"r = {rom.ranks[0]}, lam1 = {result.lambdas['lam1']:.3e}, "
          f"training error {result.search.value:.3e}")

    def solve(mu):
        return heat_solve(config, mu)

    learned = evaluate(rom, test_params, solve, "imex_euler", None)
    galerkin = intrusive_rom(structure, heat_full_operators(config),
                             rom.bases, rom.state_bound)
    galerkin.meta.update(rom.meta)
    intrusive = evaluate(galerkin, test_params, solve, "imex_euler", None)
    elapsed = time.perf_counter() - start

    learned.rom_surface.to_csv(out / "learned_errors.csv")
    intrusive.rom_surface.to_csv(out / "intrusive_errors.csv")
    summary = {"learned": learned.rom_surface.summary,
               "intrusive": intrusive.rom_surface.summary,
               "projection": learned.projection_surface.summary,
               "rank": rom.ranks[0], "lambdas": result.lambdas,
               "wall_seconds": round(elapsed, 2)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for name in ("learned", "intrusive", "projection"):
        s = summary[name]
        print(f"{name:>10}: geometric mean {s['geometric_mean']:.3e}, "
              f"max {s['max']:.3e}")
    print(f"done in {elapsed:.1f}s; results in {out}")


if __name__ == "__main__":
    main()
