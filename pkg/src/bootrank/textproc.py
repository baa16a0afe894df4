"""Deterministic text processing: tokenization, stable hashing, noise injection."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigError

# Unicode alphanumeric runs; underscore is treated as a separator.
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def tokenize(text: str) -> list[str]:
    """Lowercase `text` and split it on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of `data`, as an unsigned integer."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 20)
def _token_hash(token: str) -> int:
    return fnv1a64(token.encode("utf-8"))


def hash_token(token: str, buckets: int) -> int:
    """Map a token to a bucket id in [0, buckets) via FNV-1a on its UTF-8 bytes."""
    if buckets < 1:
        raise ConfigError(f"buckets must be >= 1, got {buckets}")
    return _token_hash(token) % buckets


def derive_seed(*parts: int | str) -> int:
    """Fold the string forms of `parts` into one 64-bit seed.

    Stable across runs and platforms; used to give every randomized
    sub-step (per query, per epoch, per role) its own reproducible stream.
    """
    h = _FNV_OFFSET
    for part in parts:
        for byte in str(part).encode("utf-8"):
            h = ((h ^ byte) * _FNV_PRIME) & _MASK64
        # separator byte so ("ab", "c") and ("a", "bc") differ
        h = ((h ^ 0x1F) * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class NoiseConfig:
    """Corruption settings: fraction touched per stage, mask sentinel, RNG seed."""

    rate: float = 0.1
    mask_symbol: str = "__mask__"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"noise rate must be in [0, 1], got {self.rate}")


def _touch_count(rate: float, length: int) -> int:
    # ceil(rate * length) with a guard against float fuzz pushing an exact
    # integer product over the next boundary (e.g. 0.3 * 10 -> 3.0000000000000004)
    if rate <= 0.0 or length <= 0:
        return 0
    return max(1, math.ceil(rate * length - 1e-9))


def corrupt(tokens: Sequence[str], config: NoiseConfig) -> list[str]:
    """Apply shuffle, delete, mask stages in order, each touching ceil(rate * current length) positions.

    With rate r and n input tokens the output has n - ceil(r*n) tokens, of
    which ceil(r * (n - ceil(r*n))) are the mask sentinel. rate 0 returns the
    input unchanged. Deterministic given `config.seed`.
    """
    out = list(tokens)
    if config.rate == 0.0 or not out:
        return out
    rng = np.random.default_rng(config.seed)

    m = _touch_count(config.rate, len(out))
    positions = np.sort(rng.choice(len(out), size=m, replace=False))
    shuffled = rng.permutation(m)
    picked = [out[p] for p in positions]
    for p, j in zip(positions, shuffled):
        out[p] = picked[j]

    m = _touch_count(config.rate, len(out))
    drop = set(rng.choice(len(out), size=m, replace=False).tolist())
    out = [tok for i, tok in enumerate(out) if i not in drop]

    m = _touch_count(config.rate, len(out))
    if m:
        for p in rng.choice(len(out), size=m, replace=False):
            out[p] = config.mask_symbol
    return out
