"""Write a simulated Model A / Model B dataset as a covreg JSON file.

    python3 scripts/make_dataset.py out.json --model A --n 100 --p 5 --seed 1
"""

import argparse

import numpy as np

from covreg import datafile, simulate
from covreg.model import Dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--model", choices=["A", "B", "A_misspecified"], default="A")
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--p", type=int, default=5)
    ap.add_argument("--error", choices=["normal", "mixture"], default="mixture")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pd-floor", type=float, default=1e-8)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    if args.model == "B":
        fam, X = simulate.gen_model_b(args.n, args.p, rng)
        Xfit = X
    elif args.model == "A":
        fam, X = simulate.gen_model_a(args.n, args.p, rng, pd_floor=args.pd_floor)
        Xfit = X
    else:
        fam, X, Xfit = simulate.gen_misspecified_a(args.n, args.p, rng, pd_floor=args.pd_floor)
    beta0 = simulate.BETA0
    Y = simulate.draw_response(fam, beta0, X, simulate.ErrorLaw(args.error), rng)
    datafile.dump(datafile.from_dataset(Dataset(fam, Xfit, Y)), args.out)


if __name__ == "__main__":
    main()
