"""FitzHugh-Nagumo benchmark: train on the 54-point grid, test on 250 points.

Usage: python scripts/run_fhn.py [--out results/fhn] [--workers 4]

Full-order solves run in worker processes; the ROM side is single-threaded.
"""
import argparse
import json
import time
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from popinf.cli import load_param_file
from popinf.dataset import SnapshotSet
from popinf.fom import FhnConfig, fhn_solve, fhn_structure
from popinf.pipeline import TrainConfig, evaluate, train

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def solve_all(config, params, workers):
    func = partial(fhn_solve, config)
    if workers == 1:
        return [func(mu) for mu in params]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(func, list(params), chunksize=4))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/fhn")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--energy", type=float, default=1e-7)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    doc = json.loads((CONFIGS / "fhn_train.json").read_text())
    config = FhnConfig(**doc["solver"])
    train_params = load_param_file(CONFIGS / "fhn_train.json")
    test_params = load_param_file(CONFIGS / "fhn_test.json")

    start = time.perf_counter()
    results = solve_all(config, train_params, args.workers)
    if not all(r.ok for r in results):
        raise SystemExit("a training solve diverged")
    snaps = SnapshotSet(train_params, [r.states for r in results],
                        results[0].time, ("u1", "u2"),
                        ("alpha", "beta", "gamma", "eps"))
    result = train(fhn_structure(), snaps, TrainConfig(energy=args.energy))
    rom = result.rom
    lam = ", ".join(f"{k}={v:.3e}" for k, v in result.lambdas.items())
    print(f"r = {list(rom.ranks)}, {lam}")

    test_results = solve_all(config, test_params, args.workers)
    lookup = {tuple(mu): r for mu, r in zip(test_params, test_results)}
    ev = evaluate(rom, test_params, lambda mu: lookup[tuple(mu)])
    elapsed = time.perf_counter() - start

    surface = ev.rom_surface
    surface.to_csv(out / "errors.csv")
    summary = {"rom": surface.summary,
               "projection": ev.projection_surface.summary,
               "stable_fraction": float(np.mean(surface.stable)),
               "ranks": list(rom.ranks), "lambdas": result.lambdas,
               "wall_seconds": round(elapsed, 1)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    s = summary["rom"]
    print(f"median {s['median']:.3%}, q90 {s['q90']:.3%}, "
          f"stable {summary['stable_fraction']:.1%}")
    print(f"done in {elapsed:.0f}s; results in {out}")


if __name__ == "__main__":
    main()
