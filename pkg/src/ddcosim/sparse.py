"""Sparse matrix assembly and direct LU solves for the Newton loops.

Both the device and the circuit assemble their Jacobians as triplet lists;
this module canonicalizes them (duplicates summed, deterministic order
independent of input permutation) and wraps a direct sparse LU with partial
pivoting.  Factorizations are immutable and reusable across multiple
right-hand sides.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# When enabled, every solve() verifies the backward-error bound of the
# Factorization contract.  Cheap (one mat-vec) but off by default in hot loops.
CHECK_SOLVES = bool(int(os.environ.get("DDCOSIM_CHECK_SOLVES", "0")))

_RESIDUAL_BOUND = 1e-10

# Dense fallback used only to locate the offending pivot of a singular matrix.
_DENSE_DIAG_LIMIT = 2048


class SingularMatrixError(Exception):
    """Factorization failed; pivot_index is the first unusable pivot (or None)."""

    def __init__(self, message: str, pivot_index=None, structural: bool = False):
        super().__init__(message)
        self.pivot_index = pivot_index
        self.structural = structural


class SparseMatrix:
    """Immutable CSC matrix with canonical (row-major sorted) triplet form."""

    __slots__ = ("n_rows", "n_cols", "rows", "cols", "values", "_csc")

    def __init__(self, n_rows, n_cols, rows, cols, values):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.rows = rows
        self.cols = cols
        self.values = values
        self._csc = None

    @property
    def entries(self):
        """Canonical (row, col, value) triplets, duplicates already summed."""
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    @property
    def nnz(self) -> int:
        return self.values.size

    def tocsc(self) -> sp.csc_matrix:
        if self._csc is None:
            self._csc = sp.csc_matrix(
                (self.values, (self.rows, self.cols)),
                shape=(self.n_rows, self.n_cols),
            )
        return self._csc

    def todense(self) -> np.ndarray:
        return np.asarray(self.tocsc().todense())

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.tocsc() @ x

    def norm_inf(self) -> float:
        if self.values.size == 0:
            return 0.0
        row_sums = np.zeros(self.n_rows)
        np.add.at(row_sums, self.rows, np.abs(self.values))
        return float(row_sums.max())


def assemble(n_rows: int, n_cols: int, triplets) -> SparseMatrix:
    """Build a SparseMatrix from (row, col, value) triplets.

    Duplicate positions are summed.  The canonical entry order (and therefore
    every downstream factorization and solve) is independent of the input
    permutation: triplets are sorted by (row, col, value) before reduction.
    """
    if isinstance(triplets, tuple) and len(triplets) == 3 and isinstance(triplets[0], np.ndarray):
        rows, cols, values = triplets
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
    else:
        triplets = list(triplets)
        if triplets:
            rows = np.array([t[0] for t in triplets], dtype=np.int64)
            cols = np.array([t[1] for t in triplets], dtype=np.int64)
            values = np.array([t[2] for t in triplets], dtype=np.float64)
        else:
            rows = np.empty(0, dtype=np.int64)
            cols = np.empty(0, dtype=np.int64)
            values = np.empty(0, dtype=np.float64)

    if rows.size:
        if rows.min() < 0 or rows.max() >= n_rows:
            bad = int(rows[(rows < 0) | (rows >= n_rows)][0])
            raise IndexError(f"row index {bad} outside [0, {n_rows})")
        if cols.min() < 0 or cols.max() >= n_cols:
            bad = int(cols[(cols < 0) | (cols >= n_cols)][0])
            raise IndexError(f"column index {bad} outside [0, {n_cols})")

        order = np.lexsort((values, cols, rows))
        rows = rows[order]
        cols = cols[order]
        values = values[order]
        # group boundaries of equal (row, col); reduceat sums left-to-right
        new_group = np.empty(rows.size, dtype=bool)
        new_group[0] = True
        new_group[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(new_group)
        values = np.add.reduceat(values, starts)
        rows = rows[starts]
        cols = cols[starts]

    return SparseMatrix(n_rows, n_cols, rows, cols, values)


class Factorization:
    """Opaque LU decomposition; solve() is safe to call from multiple readers."""

    __slots__ = ("matrix", "_lu", "n")

    def __init__(self, matrix: SparseMatrix, lu):
        self.matrix = matrix
        self._lu = lu
        self.n = matrix.n_rows

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise ValueError(f"rhs has {b.shape[0]} rows, matrix is {self.n}x{self.n}")
        x = self._lu.solve(b)
        if CHECK_SOLVES:
            _check_residual(self.matrix, x, b)
        return x


def _check_residual(A: SparseMatrix, x, b):
    r = np.abs(A.matvec(x) - b)
    bound = _RESIDUAL_BOUND * (
        A.norm_inf() * np.abs(x).max(initial=0.0) + np.abs(b).max(initial=0.0)
    )
    if r.max(initial=0.0) > bound:
        raise FloatingPointError(
            f"linear solve residual {r.max():.3e} exceeds bound {bound:.3e}"
        )


def _locate_bad_pivot(A: SparseMatrix):
    """Dense partial-pivoting elimination to name the first failing pivot."""
    if A.n_rows > _DENSE_DIAG_LIMIT:
        return None
    dense = A.todense()
    _, u = scipy.linalg.lu(dense, permute_l=True)
    diag = np.abs(np.diag(u))
    scale = np.abs(dense).max(initial=1.0)
    bad = np.flatnonzero(diag <= scale * 1e-14)
    return int(bad[0]) if bad.size else None


def factorize(A: SparseMatrix) -> Factorization:
    """LU-factorize a square SparseMatrix.

    Raises SingularMatrixError with the pivot index for structurally empty
    rows/columns or an exactly singular numerical factorization.
    """
    if A.n_rows != A.n_cols:
        raise ValueError(f"matrix is {A.n_rows}x{A.n_cols}, not square")
    csc = A.tocsc()
    row_count = np.zeros(A.n_rows, dtype=np.int64)
    np.add.at(row_count, A.rows, 1)
    empty_rows = np.flatnonzero(row_count == 0)
    if empty_rows.size:
        raise SingularMatrixError(
            f"structurally singular: row {empty_rows[0]} is empty",
            pivot_index=int(empty_rows[0]),
            structural=True,
        )
    col_count = np.diff(csc.indptr)
    empty_cols = np.flatnonzero(col_count == 0)
    if empty_cols.size:
        raise SingularMatrixError(
            f"structurally singular: column {empty_cols[0]} is empty",
            pivot_index=int(empty_cols[0]),
            structural=True,
        )
    try:
        lu = spla.splu(csc)
    except RuntimeError as exc:
        raise SingularMatrixError(
            f"numerically singular matrix: {exc}",
            pivot_index=_locate_bad_pivot(A),
            structural=False,
        ) from exc
    return Factorization(A, lu)


def solve(F: Factorization, b: np.ndarray) -> np.ndarray:
    return F.solve(b)
