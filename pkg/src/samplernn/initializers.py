"""Seeded weight initialization routines.

All functions take a ``numpy.random.Generator`` so that a single master
seed reproduces every draw bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def standard_normal(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    return rng.standard_normal(shape).astype(dtype)


def he_fan_in(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    """Normal draws scaled by sqrt(2 / fan_in); fan_in is the last axis."""
    if len(shape) < 1:
        raise ContractError("he_fan_in requires at least one dimension")
    fan_in = shape[-1]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def orthogonal(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    """Orthogonal matrix via QR of a Gaussian draw, sign-corrected with the
    diagonal of R so the result does not depend on the QR sign convention.

    Square gives an exactly orthogonal matrix; tall gives orthonormal
    columns, wide orthonormal rows.
    """
    if len(shape) != 2:
        raise ContractError(f"orthogonal init requires a 2-D shape, got {shape}")
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q.astype(dtype)


def constant(value: float, shape, dtype=np.float32) -> np.ndarray:
    return np.full(shape, value, dtype=dtype)
