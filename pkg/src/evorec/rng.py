"""Labelled sub-seeds: every random stream derives from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))])
