"""Fixed scanpath corpus for rendering regression tests.

Built from a seeded PCG64 stream with integer-valued times so it is the same
on every platform and independent of the simulator.
"""
import numpy as np

from gazelens.core import Fixation, Scanpath


def golden_corpus(n=50, seed=20240501):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        m = int(rng.integers(1, 40))
        t = 0
        fixes = []
        for _ in range(m):
            d = int(rng.integers(110, 900))
            x = float(rng.integers(0, 1680 * 4)) / 4
            y = float(rng.integers(0, 1050 * 4)) / 4
            fixes.append(Fixation(x, y, float(t), float(t + d)))
            t += d + int(rng.integers(20, 80))
        out.append(Scanpath(tuple(fixes), trial_id=f"golden-{k:02d}"))
    return out
