"""How many distinct frames does a page visit when evicted and re-faulted?

Compares the simulated page cache with the balls-into-bins expectation.
"""

import numpy as np

from hammersim.osmodel import TARGET_FILE, build_system
from hammersim.rng import substream
from hammersim.waylay import expected_unique, relocation_frames

os_ = build_system(2**16, substream(0, "demo"))
key = (TARGET_FILE, 8)
os_.cache.evict(key)
pool = os_.cache.pool_size
os_.cache.fault_in(key)
print(f"frames the page can land on: {pool}")

for n in (100, 1_000, 5_000, 20_000):
    placed = relocation_frames(os_, key, n)
    unique = len(np.unique(placed))
    print(f"{n:6d} relocations: {unique:6d} unique frames (expected {expected_unique(pool, n):8.1f})")
