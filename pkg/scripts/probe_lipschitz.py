"""Weight-Jacobian spectral norms of softmax and sigmoid on scaled score rows.

    python3 scripts/probe_lipschitz.py --scores 1,-1,0.5 --scales 0,1,10,100
"""

import argparse

import numpy as np

from sigattn.analysis import jacobian_norm_probe, sigmoid_derivative_scan


def _floats(text):
    return [float(x) for x in text.split(",")]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scores", type=_floats, default=[1.0, -1.0])
    p.add_argument("--scales", type=_floats, default=[0.0, 1.0, 10.0, 100.0])
    args = p.parse_args()

    rep = jacobian_norm_probe(args.scores, args.scales)
    print(rep.table())
    peak, at = sigmoid_derivative_scan(np.linspace(-10, 10, 20001))
    print(f"max sigmoid'(x) on [-10, 10]: {peak:.6f} at x = {at:g}")


if __name__ == "__main__":
    main()
