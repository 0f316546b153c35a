"""Named, counter-based random substreams.

Every stream is a numpy ``Generator`` over the Philox4x64 counter-based bit
generator, keyed by a ``SeedSequence`` built from the run seed and a stable
hash of the stream path.  The same (seed, path) yields the same stream on
every platform and in every process.
"""
from __future__ import annotations

import zlib

import numpy as np


def _path_key(path: str) -> tuple[int, ...]:
    return tuple(zlib.crc32(part.encode("utf-8")) for part in path.split("/") if part)


def substream(seed: int, path: str = "") -> np.random.Generator:
    """Return the generator for ``path`` (e.g. ``"synth/train/17"``) under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_path_key(path))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit integer seed from ``rng``."""
    return int(rng.integers(0, 2**63 - 1))
