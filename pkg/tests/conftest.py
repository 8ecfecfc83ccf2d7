import random

import numpy as np
import pytest
import torch

from phrasevae.corpus import HOLD, REST, STEPS_PER_BAR, DatasetCache, build_cache

# per-bar rhythm patterns in 16th-note durations (sum 16), with some rests
BAR_PATTERNS = [
    [4, 4, 4, 4],
    [2, 2, 4, 2, 2, 4],
    [8, 8],
    [4, 2, 2, 4, 4],
    [2, 2, 2, 2, 8],
    [16],
    [4, 4, 8],
    [3, 1, 4, 3, 1, 4],
]
MAJOR_SCALE = [0, 2, 4, 5, 7, 9, 11]


def make_phrase(rng: random.Random, bars: int = 8, root: int = 60, rest_prob: float = 0.1) -> np.ndarray:
    """One synthetic melody: per-bar rhythm patterns, random walk on a scale."""
    tokens = []
    degree = rng.randrange(len(MAJOR_SCALE))
    octave = 0
    for _ in range(bars):
        pattern = rng.choice(BAR_PATTERNS)
        for dur in pattern:
            if rng.random() < rest_prob:
                tokens.extend([REST] * dur)
                continue
            degree += rng.choice([-2, -1, -1, 0, 1, 1, 2])
            while degree < 0:
                degree += len(MAJOR_SCALE)
                octave -= 1
            while degree >= len(MAJOR_SCALE):
                degree -= len(MAJOR_SCALE)
                octave += 1
            octave = max(-1, min(1, octave))
            pitch = root + 12 * octave + MAJOR_SCALE[degree]
            tokens.append(pitch)
            tokens.extend([HOLD] * (dur - 1))
    return np.array(tokens, dtype=np.int64)


def make_songs(n_songs: int, bars: int = 8, seed: int = 0) -> dict[str, np.ndarray]:
    rng = random.Random(seed)
    return {f"song{i:03d}": make_phrase(rng, bars) for i in range(n_songs)}


def make_cache(n_songs: int = 8, bars: int = 8, seed: int = 0) -> DatasetCache:
    return build_cache(make_songs(n_songs, bars, seed), hop_bars=1, seed=seed)


@pytest.fixture
def small_cache():
    return make_cache(n_songs=6)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
