"""RMSE of the GAM fit as the sample size grows (root-n rate gives a ratio of 2 per 4x)."""
import argparse
import warnings

from odsate.errors import IllConditionedWarning
from odsate.sim_harness import ScenarioSpec, generate_pool, run_replications


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="500,1000,2000,4000")
    ap.add_argument("--method", default="gam")
    ap.add_argument("--replications", type=int, default=200)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    warnings.simplefilter("ignore", IllConditionedWarning)

    base = ScenarioSpec("M1", v=0.01, p10=0.2, replications=args.replications, seed=args.seed)
    pool = generate_pool(base)
    prev = None
    for n in map(int, args.sizes.split(",")):
        sc = ScenarioSpec("M1", v=0.01, p10=0.2, n_sample=n, replications=args.replications, seed=args.seed)
        m = run_replications(sc, [args.method], jobs=args.jobs, pool=pool).metrics[0]
        ratio = "" if prev is None else f"  ratio to previous {prev / m.rmse_x1000:.2f}"
        print(f"n={n:5d} RMSEx1000={m.rmse_x1000:.4f} CP={m.coverage_pct:5.1f}{ratio}")
        prev = m.rmse_x1000


if __name__ == "__main__":
    main()
