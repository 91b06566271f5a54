"""Named, independent random streams keyed by (seed, purpose, epoch)."""

from __future__ import annotations

import zlib

import numpy as np

PURPOSES = ("init", "shuffle", "augment", "data", "noise")


def stream(seed: int, purpose: str, epoch: int = 0) -> np.random.Generator:
    """Return a generator that depends only on its three keys.

    Streams for different purposes never share state, so e.g. changing the
    augmentation policy cannot perturb the shuffle order of a paired run.
    """
    tag = zlib.crc32(purpose.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), tag, int(epoch)])))
