"""
Exact and partitioned descriptor search
=======================================

"""

import time
import numpy as np
from copydet.sift import FeatureSet
from copydet.vecindex import build_flat, build_partitioned, search

rng = np.random.default_rng(0)
# 200 fake images x 250 descriptors, plus noisy copies of some of them as queries
sets = [FeatureSet(f"img{i:03d}", np.zeros((250, 5)), rng.integers(0, 256, (250, 128), dtype=np.uint8))
        for i in range(200)]
src = np.concatenate([s.descriptors[:5] for s in sets[:40]])
queries = np.clip(src.astype(int) + rng.integers(-8, 9, src.shape), 0, 255).astype(np.uint8)

flat = build_flat(sets)
t = time.perf_counter()
exact = search(flat, queries, k=1)
print(f"flat: {flat.count} vectors, {time.perf_counter() - t:.3f}s for {len(queries)} queries")

part = build_partitioned(sets)  # nlist defaults to sqrt(count)
for nprobe in (1, 4, 16, part.nlist):
    t = time.perf_counter()
    approx = search(part, queries, k=1, nprobe=nprobe)
    same = np.mean([a[0] == b[0] for a, b in zip(approx, exact)])
    print(f"nprobe {nprobe:4d}/{part.nlist}: top-1 agrees with flat on {same:.1%} ({time.perf_counter() - t:.3f}s)")
