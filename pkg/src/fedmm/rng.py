"""Deterministic random streams.

Every random draw in the package flows through a counter-based Philox
generator keyed by a 64-bit seed. Stream seeds are derived from a master
seed plus a string label path (sha256), so adding a new consumer never
perturbs the draws of existing ones, and the same (seed, labels) pair
yields the same stream on every platform.

Normal variates use the Box-Muller transform over Philox uniforms instead
of numpy's ziggurat sampler: the mapping from raw generator output to
samples is then fixed by this file rather than by the numpy version.
"""

from __future__ import annotations

import hashlib

import numpy as np


def seed_for(master_seed: int, *labels: object) -> int:
    """Derive a 64-bit stream seed from a master seed and a label path.

    Labels are joined with '|' and hashed together with the master seed;
    distinct label paths give independent streams for any fixed master.
    """
    tag = "|".join(str(x) for x in labels)
    digest = hashlib.sha256(f"{master_seed}|{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int) -> np.random.Generator:
    """A Philox-backed generator for the given 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=seed))


def substream(master_seed: int, *labels: object) -> np.random.Generator:
    """Shorthand for stream(seed_for(master_seed, *labels))."""
    return stream(seed_for(master_seed, *labels))


def normal(gen: np.random.Generator, shape, scale: float = 1.0) -> np.ndarray:
    """Box-Muller normal variates with mean 0 and the given standard deviation.

    Draws two uniform blocks u1, u2 and maps them through
    r = sqrt(-2 ln(1 - u1)), z = r * (cos, sin)(2 pi u2); the cosine block
    precedes the sine block in the output. 1 - u1 keeps the log argument
    in (0, 1] since gen.random() can return exactly 0.
    """
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    count = int(np.prod(shape)) if shape else 1
    pairs = (count + 1) // 2
    u1 = gen.random(pairs)
    u2 = gen.random(pairs)
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
    return (scale * z).reshape(shape)
