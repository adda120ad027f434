"""Pure numpy implementations of the hot kernels.

These are the reference fallback for ``_kernels.pyx``; both expose the same
three functions with identical signatures. Results agree to rounding.
"""

from __future__ import annotations

import math

import numpy as np

_BLOCK = 512


def _bit_columns(bits: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Return ``reach[:, cols]`` as a boolean (N, len(cols)) array."""
    words = bits[:, cols >> 6]
    shift = (cols & 63).astype(np.uint64)
    return ((words >> shift) & np.uint64(1)).astype(bool)


def _bit_rows(bits: np.ndarray, rows: slice, n: int) -> np.ndarray:
    """Return ``reach[rows, :]`` as a boolean array."""
    block = np.ascontiguousarray(bits[rows]).view(np.uint8)
    return np.unpackbits(block, axis=1, bitorder="little")[:, :n].astype(bool)


def acausal_pair_sum(W: np.ndarray, bits: np.ndarray) -> float:
    """Sum of ``|W_i - W_j|^2`` over unordered pairs unrelated in ``bits``.

    ``bits`` is the packed reachability table: bit ``j`` of row ``i`` is set
    when ``i`` causally precedes ``j``.
    """
    W = np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    if n < 2:
        return 0.0
    # Removing the mean leaves every difference unchanged and keeps the
    # expanded quadratic form well conditioned.
    Wc = W - W.mean(axis=0)
    sq = np.einsum("ij,ij->i", Wc, Wc)
    partial = []
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        idx = np.arange(start, stop)
        related = _bit_rows(bits, slice(start, stop), n) | _bit_columns(bits, idx).T
        cols = np.arange(n)
        mask = (~related) & (cols[None, :] > idx[:, None])
        m = mask.astype(np.float64)
        cnt = m.sum(axis=1)
        cross = np.einsum("ij,ij->i", Wc[start:stop], m @ Wc)
        rows = cnt * sq[start:stop] - 2.0 * cross + m @ sq
        partial.append(rows)
    return math.fsum(np.concatenate(partial))


def pair_shell_sum(
    z: np.ndarray,
    V: np.ndarray,
    a: np.ndarray,
    R: np.ndarray,
    box: np.ndarray,
) -> float:
    """Sum ``|V_i - V_j|^2`` over pairs whose separation lies in the shell.

    The shell for a pair is ``[(a_i + a_j)/2, (R_i + R_j)/2]``. ``box`` holds
    per-axis periods (0 for an open axis); periodic axes use minimum image.
    """
    z = np.asarray(z, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    n = z.shape[0]
    box = np.asarray(box, dtype=np.float64)
    periodic = box > 0
    total = []
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        dz = z[start:stop, None, :] - z[None, :, :]
        if periodic.any():
            L = np.where(periodic, box, 1.0)
            dz = np.where(periodic, dz - L * np.round(dz / L), dz)
        dist = np.sqrt(np.einsum("ijk,ijk->ij", dz, dz))
        lo = 0.5 * (a[start:stop, None] + a[None, :])
        hi = 0.5 * (R[start:stop, None] + R[None, :])
        upper = np.arange(n)[None, :] > np.arange(start, stop)[:, None]
        mask = upper & (dist >= lo) & (dist <= hi)
        i, j = np.nonzero(mask)
        dv = V[start + i] - V[j]
        total.append(np.einsum("ij,ij->i", dv, dv))
    if not total:
        return 0.0
    return math.fsum(np.concatenate(total))


def closure_bits(
    n: int,
    child_ptr: np.ndarray,
    child_idx: np.ndarray,
    order: np.ndarray,
) -> np.ndarray:
    """Packed transitive closure of a DAG given in CSR child form.

    ``order`` must be a topological order. Row ``i`` of the result has bit
    ``j`` set iff ``j`` is reachable from ``i`` by a directed path.
    """
    nwords = (n + 63) // 64
    bits = np.zeros((n, nwords), dtype=np.uint64)
    one = np.uint64(1)
    for v in order[::-1]:
        row = bits[v]
        for c in child_idx[child_ptr[v] : child_ptr[v + 1]]:
            row |= bits[c]
            row[c >> 6] |= one << np.uint64(c & 63)
    return bits
