"""Counter-based random stream derivation.

Every random quantity in the package is drawn from a stream derived from
the experiment's master seed and an integer key path, via Philox seeded
through ``SeedSequence(master_seed, spawn_key=key_path)``.  Streams with
distinct key paths are statistically independent, and a stream's output
is a pure function of ``(master_seed, key_path)``: results never depend
on scheduling or worker count.

Key-path conventions used across the package (first component = domain):
"""

import numpy as np

# domain constants for the first key component
TRAJECTORY = 1      # (TRAJECTORY, replica_index)
SPINE = 2           # (SPINE, replica_index)
IMMIGRATION = 3     # (IMMIGRATION, replica_index, stream_kind, ...)
EXTINCTION_TIME = 4
VERIFY = 5          # (VERIFY, test_index, side, ...)
MOTION_TEST = 6

__doc__ += "\n".join(
    f"  {name} = {value}"
    for name, value in [
        ("TRAJECTORY", TRAJECTORY),
        ("SPINE", SPINE),
        ("IMMIGRATION", IMMIGRATION),
        ("EXTINCTION_TIME", EXTINCTION_TIME),
        ("VERIFY", VERIFY),
        ("MOTION_TEST", MOTION_TEST),
    ]
)


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Return the Generator for ``(master_seed, key)``."""
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
