"""Write a synthetic asymmetric ReRAM pulse-response measurement.

Stands in for a lab measurement: one SoftBounds device with unequal up and
down steps and 10% cycle-to-cycle noise is driven through 200 up, 200 down
and 100 alternating pulse pairs, then mapped to a conductance window with
additive read noise.  Fit it with ``crossbar-sim fit-device``.
"""

import argparse
from pathlib import Path

import numpy as np

from crossbar_sim.devices import DeviceParams, simulate_response, standard_protocol
from crossbar_sim.fitting import write_measurement
from crossbar_sim.numerics import RandomStream

TRUE_DEVICE = DeviceParams(
    kind="SoftBounds", dw_min=0.03, dw_min_std=0.1, dw_min_dtod=0.0,
    w_max=1.0, w_min=-1.0, up_down=0.35,
)
G_CENTER, G_HALF = 30.0, 12.0  # uS
READ_NOISE = 0.05  # uS


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/devices/reram_trace.csv")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    stream = RandomStream(args.seed, "reram-trace")
    protocol = standard_protocol()
    w = simulate_response(TRUE_DEVICE, protocol, stream.child(0), w0=0.0)[:, 0]
    g = G_CENTER + G_HALF * w + READ_NOISE * stream.child(1).gaussian(w.shape, np.float64)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_measurement(args.out, protocol, g)
    print(f"wrote {len(g)} pulses to {args.out}")


if __name__ == "__main__":
    main()
