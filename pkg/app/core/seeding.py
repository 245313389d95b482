"""Counter-based random streams.

Every stream is `SeedSequence(master_seed, spawn_key=(phase, *counters))`, so a stream
depends only on the master seed and its coordinates, never on how many other streams
were drawn before it. This keeps parallel rollouts byte-reproducible.
"""
from typing import Dict

import numpy as np

PHASE_KEYS: Dict[str, int] = {
    "data": 0,
    "init": 1,
    "sft": 2,
    "mask": 3,
    "rollout": 4,
    "prompts": 5,
    "eval": 6,
    "throughput": 7,
    "theory": 8,
}

SEED_SCHEME = "numpy.SeedSequence(master, spawn_key=(phase_key, *counters)) -> PCG64"


def stream(master_seed: int, phase: str, *counters: int) -> np.random.Generator:
    if phase not in PHASE_KEYS:
        raise KeyError(f"Unknown random stream phase: {phase}")
    key = (PHASE_KEYS[phase], *(int(c) for c in counters))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(master_seed), spawn_key=key)))
