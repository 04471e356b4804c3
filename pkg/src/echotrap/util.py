"""Small shared numerics and RNG helpers."""

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Named RNG substream derived from one experiment seed.

    The stream key is a stable hash of the name, so e.g. the corpus and the
    parameter-init streams never collide and results are reproducible across
    platforms and processes.
    """
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x))
    return z / z.sum()


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x)
    return shifted - np.log(np.exp(shifted).sum())


def logsumexp(x: np.ndarray) -> float:
    m = np.max(x)
    if np.isneginf(m):
        return float("-inf")
    return float(m + np.log(np.exp(x - m).sum()))


def global_norm(arrays) -> float:
    total = 0.0
    for a in arrays:
        total += float(np.sum(np.asarray(a, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def round_half_away_from_zero(x: float) -> int:
    if x >= 0:
        return int(np.floor(x + 0.5))
    return -int(np.floor(-x + 0.5))
