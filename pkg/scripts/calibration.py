"""Empirical coverage of the 95% one-step credible band on prior-generated SARIMA series.

    python scripts/calibration.py --order 1,1,0,1,0,0,12 --series 500 --length 200
"""

import argparse
import time
import warnings

import numpy as np

from bctlight.critique import NonConvergence, PriorSpec, SarimaOrder, credible_interval, sample_posterior_forecasts, \
    simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--order", default="1,1,0,1,0,0,12", help="p,d,q,P,D,Q,s")
    ap.add_argument("--series", type=int, default=500)
    ap.add_argument("--length", type=int, default=200)
    ap.add_argument("--draws", type=int, default=2000)
    ap.add_argument("--horizon", type=int, default=1)
    ap.add_argument("--seed", type=int, default=10_000)
    args = ap.parse_args()

    order = SarimaOrder(*(int(v) for v in args.order.split(",")))
    prior = PriorSpec(mu_c=0.0, sigma_c=2.0, lower_c=-10.0, upper_c=10.0)
    hits, widths, acc = 0, [], []
    t0 = time.perf_counter()
    warnings.simplefilter("ignore", NonConvergence)
    for k in range(args.series):
        rng = np.random.default_rng(args.seed + k)
        mu, coef, s2 = prior.sample(order, rng)
        y = simulate(order, mu, coef, s2, args.length + args.horizon, rng)
        hist, truth = y[:-args.horizon], y[-1]
        ss = sample_posterior_forecasts(hist, order, prior, args.draws, args.horizon, rng)
        ci = credible_interval(ss.forecasts)
        hits += ci.lower <= truth <= ci.upper
        widths.append(ci.upper - ci.lower)
        acc.append(ss.acceptance)
    n = args.series
    rate = hits / n
    print(f"order {order}")
    print(f"coverage {rate:.3f} (binomial s.e. {np.sqrt(0.95 * 0.05 / n):.3f}) over {n} series")
    print(f"median width {np.median(widths):.3f}, mean acceptance {np.mean(acc):.3f}, {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
