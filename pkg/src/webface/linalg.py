"""Dot products with a fixed accumulation order.

Rows are processed in blocks, but within every dot product the terms are added
strictly left to right, so each value is bitwise identical to the plain scalar
loop ``s = 0.0; for j: s += a[j] * b[j]`` in float64.
"""

from __future__ import annotations

import numpy as np


def ordered_norms(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    acc = np.zeros(rows.shape[0])
    for j in range(rows.shape[1]):
        acc += rows[:, j] * rows[:, j]
    return np.sqrt(acc)


def unit_rows(rows: np.ndarray) -> np.ndarray:
    """Divide each row by its ordered L2 norm; zero rows stay zero."""
    rows = np.asarray(rows, dtype=np.float64)
    norms = ordered_norms(rows)
    out = np.zeros_like(rows)
    nz = norms > 0
    out[nz] = rows[nz] / norms[nz, None]
    return out


def ordered_dot_matrix(a: np.ndarray, b: np.ndarray, block_rows: int = 4096) -> np.ndarray:
    """``a @ b.T`` in float64 with sequential accumulation over the shared dimension."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    out = np.empty((a.shape[0], b.shape[0]))
    bt = np.ascontiguousarray(b.T)
    for start in range(0, a.shape[0], block_rows):
        block = np.ascontiguousarray(a[start : start + block_rows].T)
        acc = np.zeros((block.shape[1], b.shape[0]))
        for j in range(a.shape[1]):
            acc += block[j][:, None] * bt[j][None, :]
        out[start : start + block_rows] = acc
    return out


def ordered_pair_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise ``sum(a[i] * b[i])`` with the same left-to-right accumulation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    acc = np.zeros(a.shape[0])
    for j in range(a.shape[1]):
        acc += a[:, j] * b[:, j]
    return acc
