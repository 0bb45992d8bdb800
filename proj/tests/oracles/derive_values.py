#!/usr/bin/env python3
"""Independent reference evaluations used to freeze expected values in the C++ tests.

Run: python3 tests/oracles/derive_values.py
"""
import itertools
import math

import numpy as np


def mogi_los(dx, dy, depth, dv, nu=0.25, inc_deg=0.0, az_deg=0.0, lam=0.0556):
    c = (1.0 - nu) * dv / math.pi
    r3 = (dx * dx + dy * dy + depth * depth) ** 1.5
    ue, un, uz = c * dx / r3, c * dy / r3, c * depth / r3
    th, al = math.radians(inc_deg), math.radians(az_deg)
    los = (math.sin(th) * math.cos(al), math.sin(th) * math.sin(al), math.cos(th))
    return -(4.0 * math.pi / lam) * (ue * los[0] + un * los[1] + uz * los[2]), uz


def peak_abs_phase(depth, dv, size=224, spacing=100.0, inc_deg=0.0, cx=111.5, cy=111.5):
    best = 0.0
    for r in range(size):
        for c in range(size):
            p, _ = mogi_los((c - cx) * spacing, (r - cy) * spacing, depth, dv, inc_deg=inc_deg)
            best = max(best, abs(p))
    return best


def main():
    p0, uz0 = mogi_los(0.0, 0.0, 3000.0, 1e6)
    print(f"mogi center: uz={uz0:.9f} phase={p0:.9f}")
    p1, _ = mogi_los(0.0, 0.0, 3000.0, 1.1e6)
    print(f"mogi dv=1.1e6 center phase={p1:.9f}")
    print(f"peak |phase| 64x64 grid centered on source dv=1e6: {peak_abs_phase(3000, 1e6, 64, cx=32, cy=32):.9f}")

    corner = math.exp(-(2 * 111.5 ** 2) / (2 * 56.0 ** 2))
    print(f"gaussian corner P=224 sigma=56: {corner:.9f}")

    pos, neg = [0.9, 0.7], [0.8, 0.3]
    conc = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    print(f"roc toy auc = {conc / (len(pos) * len(neg))}")

    # Operating point enumeration for the toy: thresholds at each distinct score
    scores = pos + neg
    labels = [1, 1, 0, 0]
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 1) / 2
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 0) / 2
        print(f"  thr {t}: tpr={tp} tnr={1 - fp}")

    # checkerboard block-mean of cos for 4x4 pooling
    phi = np.array([[0.0 if (r + c) % 2 == 0 else math.pi for c in range(8)] for r in range(8)])
    print("checker cos block mean:", np.cos(phi).reshape(2, 4, 2, 4).mean(axis=(1, 3)).ravel())
    phi = np.array([[0.0 if (c // 2) % 2 == 0 else math.pi for c in range(8)] for r in range(8)])
    print("stripe cos block mean:", np.cos(phi).reshape(2, 4, 2, 4).mean(axis=(1, 3)).ravel())


if __name__ == "__main__":
    main()
