"""Quick check that the compiled extension imports and behaves.

Build first:  maturin develop -m crates/py/Cargo.toml
"""
import math
import random
import tempfile

import pyhahi

m = pyhahi.metrics_from_counts(702, 198, 100, 78)
assert abs(m.precision - 0.78) < 1e-12 and abs(m.recall - 0.9) < 1e-12
assert abs(m.f1 - 2 * 0.78 * 0.9 / 1.68) < 1e-12
print(m)

rng = random.Random(0)
ts = [[rng.gauss(0, 1) for _ in range(6)] for _ in range(120)]
fc = pyhahi.static_fc(ts)
assert len(fc) == 6 and all(abs(fc[i][i] - 1) < 1e-12 for i in range(6))
assert all(abs(fc[i][j] - fc[j][i]) < 1e-12 for i in range(6) for j in range(6))

frames = pyhahi.dynamic_fc(ts, 2, base_window=7, frames=16)
assert len(frames) == 16 and len(frames[0]) == 6
assert len(pyhahi.alff(ts)) == 6

z = [[rng.gauss(0, 1) for _ in range(4)]]
assert pyhahi.dsa_loss(z, z) == 0.0
a = [[1.0, 0.0], [0.0, 1.0]]
expected = math.log(1 + 2 * math.exp(-2.0))
assert abs(pyhahi.fsa_loss(a, a) - expected) < 1e-9

try:
    pyhahi.metrics_from_counts(0, 0, 0, 0)
except ValueError:
    pass
else:
    raise AssertionError("zero counts accepted")

with tempfile.TemporaryDirectory() as d:
    cfg = '{"n_per_class": 4, "rois": 8, "n_timepoints": 80, "planted_rois": [0, 1], ' \
          '"grid": [8, 8, 8], "blocks_per_axis": [2, 2, 2]}'
    n = pyhahi.synthesize(d + "/cohort", cfg)
    assert n == 8
    print("synthesized", n, "subjects")

print("ok")
