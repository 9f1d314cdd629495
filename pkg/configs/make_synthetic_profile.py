"""Write a synthetic A100-cluster-like bandwidth profile (not a measurement).

Bus bandwidth saturates as v / (v + v_half); algorithm bandwidth is derived
from it with the usual ring factors. Intra-node curves exist for p <= 8.
"""

import sys

from parplan.cluster import BandwidthEntry, BandwidthProfile, write_profile

BUS = {"intra": 150e9, "inter": 22e9}
HALF = {"intra": 4 * 2**20, "inter": 16 * 2**20}
SIZES = [2**k for k in range(10, 33, 2)]  # 1 KiB .. 4 GiB
PARTICIPANTS = (2, 4, 8, 16, 32, 64, 128)


def algo_factor(op, p):
    if op == "all-reduce":
        return p / (2 * (p - 1))
    return p / (p - 1)


def main(path):
    rows = []
    for op in ("all-reduce", "all-gather", "reduce-scatter", "all-to-all"):
        for p in PARTICIPANTS:
            for axis in ("intra", "inter"):
                if axis == "intra" and p > 8:
                    continue
                for v in SIZES:
                    bus = BUS[axis] * v / (v + HALF[axis])
                    rows.append(BandwidthEntry(op, p, axis, float(v), bus * algo_factor(op, p)))
    write_profile(BandwidthProfile(tuple(rows)), path)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "a100_synthetic_bandwidth.csv")
