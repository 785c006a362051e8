"""Relative error of the non-ideal analog MVM against the exact product.

Weights are drawn from a Gaussian with std 0.246 clipped to [-1, 1]; inputs
are uniform in [-1, 1] with half of the entries set to zero.  Prints the
mean and spread of the per-MVM relative L2 error for the default IO
settings and for each nonideality switched on alone.
"""

import argparse
import dataclasses
import json

import numpy as np

from crossbar_sim.mvm import IOParams, analog_forward
from crossbar_sim.numerics import RandomStream


def sample_problem(n: int, batch: int, stream: RandomStream):
    w = np.clip(0.246 * stream.gaussian((n, n)), -1, 1).astype(np.float32)
    x = stream.uniform((batch, n), -1, 1)
    x[stream.uniform((batch, n)) < 0.5] = 0
    return w, x.astype(np.float32)


def relative_errors(w, x, io: IOParams, stream: RandomStream) -> np.ndarray:
    exact = x.astype(np.float64) @ w.astype(np.float64).T
    y = analog_forward(w, x, io, stream).astype(np.float64)
    return np.linalg.norm(y - exact, axis=1) / np.linalg.norm(exact, axis=1)


def variants() -> dict[str, IOParams]:
    ideal = IOParams.ideal()
    out = {"defaults": IOParams()}
    out["adc/dac only"] = dataclasses.replace(ideal, inp_bound=1.0, out_bound=10.0, inp_res=254, out_res=254,
                                              noise_management="ABS_MAX", bound_management="ITERATIVE")
    out["output noise only"] = dataclasses.replace(ideal, out_noise=0.04)
    out["weight noise only"] = dataclasses.replace(ideal, w_noise=0.01, w_noise_type="ADDITIVE_CONSTANT")
    out["ir drop only"] = dataclasses.replace(ideal, ir_drop=1.0)
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--batch", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print a JSON summary instead of a table")
    args = ap.parse_args()
    w, x = sample_problem(args.size, args.batch, RandomStream(args.seed, "mvm-problem"))
    summary = {}
    for name, io in variants().items():
        err = relative_errors(w, x, io, RandomStream(args.seed, "mvm-noise").child(name))
        summary[name] = {"mean": float(err.mean()), "std": float(err.std())}
    if args.json:
        print(json.dumps(summary, indent=2))
        return
    for name, s in summary.items():
        print(f"{name:>18s}: relative error {100 * s['mean']:6.2f}% +- {100 * s['std']:.2f}%")


if __name__ == "__main__":
    main()
