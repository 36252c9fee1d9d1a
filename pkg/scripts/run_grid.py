"""Run the coverage/bias/width simulation grid and write one report per run.

Example::

    python3 scripts/run_grid.py --replicates 50 --processes 4 --out results/grid
"""

import argparse
import itertools
import time

from bdfusion.simulation import ScenarioConfig, run_study

SIZES = [(1000, 1000), (1000, 10000), (10000, 1000), (10000, 10000)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replicates", type=int, default=50)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--processes", type=int, default=1)
    ap.add_argument("--sizes", default=None, help="comma list of n1:n2, e.g. 10000:1000")
    ap.add_argument("--transportable", choices=["yes", "no", "both"], default="both")
    ap.add_argument("--interaction", choices=["yes", "no", "both"], default="no")
    ap.add_argument("--out", default="results/grid")
    args = ap.parse_args(argv)

    pick = {"yes": [True], "no": [False], "both": [True, False]}
    sizes = SIZES if args.sizes is None else [tuple(int(v) for v in s.split(":")) for s in args.sizes.split(",")]
    configs = [ScenarioConfig(n1=n1, n2=n2, transportable=t, delta_yam=am, replicates=args.replicates,
                              seed=args.seed, processes=args.processes)
               for t, am, (n1, n2) in itertools.product(pick[args.transportable], pick[args.interaction], sizes)]

    t0 = time.perf_counter()

    def progress(cfg, r, records):
        print(f"{cfg.label} replicate {r + 1}/{cfg.replicates} ({time.perf_counter() - t0:.0f}s)", flush=True)

    report = run_study(configs, progress=progress)
    report.write(args.out)
    print(report.to_csv())


if __name__ == "__main__":
    main()
