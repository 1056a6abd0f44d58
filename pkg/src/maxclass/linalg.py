"""Rank decisions with explicit tolerance records, and subspace frames.

Every dimension this package reports traces back to a singular-value cut
made here.  The cut, the singular values straddling it, and a stability
flag are kept in a ToleranceRecord so reports can show *why* a rank was
called, and borderline calls fail loudly instead of guessing.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import InputError, RankInstabilityError

DEFAULT_RTOL = 1e-9


def default_rtol():
    """Rank tolerance relative to the largest singular value.  The
    MAXCLASS_TOL environment variable overrides the built-in default."""
    v = os.environ.get("MAXCLASS_TOL")
    if v is None:
        return DEFAULT_RTOL
    try:
        t = float(v)
    except ValueError:
        raise InputError(f"MAXCLASS_TOL is not a number: {v!r}") from None
    if not (0.0 < t < 1.0):
        raise InputError(f"MAXCLASS_TOL out of range (0, 1): {t}")
    return t


@dataclass(frozen=True)
class ToleranceRecord:
    """How one rank decision was made."""

    context: str
    rank: int
    tolerance: float          # absolute cut applied to singular values
    smallest_retained: float  # 0.0 when rank is 0
    largest_discarded: float  # 0.0 when nothing was discarded

    def as_dict(self):
        return {
            "context": self.context,
            "rank": self.rank,
            "tolerance": self.tolerance,
            "smallest_retained": self.smallest_retained,
            "largest_discarded": self.largest_discarded,
        }


_COLLECTORS: list = []


@contextmanager
def collect_records():
    """Collect every ToleranceRecord produced in the body."""
    sink: list = []
    _COLLECTORS.append(sink)
    try:
        yield sink
    finally:
        _COLLECTORS.pop()


def _emit(record):
    for sink in _COLLECTORS:
        sink.append(record)
    return record


def rank_from_singular_values(s, rtol=None, guard=10.0, context=""):
    """Rank call on a precomputed singular-value array (descending)."""
    if rtol is None:
        rtol = default_rtol()
    s = np.asarray(s, dtype=float)
    if s.size == 0 or s[0] == 0.0:
        return 0, _emit(ToleranceRecord(context, 0, 0.0, 0.0, 0.0))
    cut = s[0] * rtol
    r = int(np.sum(s > cut))
    smallest_retained = float(s[r - 1]) if r > 0 else 0.0
    largest_discarded = float(s[r]) if r < len(s) else 0.0
    rec = ToleranceRecord(context, r, float(cut), smallest_retained, largest_discarded)
    if guard is not None:
        lo, hi = cut / guard, cut * guard
        if np.any((s > lo) & (s < hi)):
            raise RankInstabilityError(
                f"rank decision unstable at tolerance ({context or 'unlabeled'})",
                smallest_retained,
                largest_discarded,
            )
    return r, _emit(rec)


def rank_decide(M, rtol=None, guard=10.0, context=""):
    """Numerical rank of a matrix via SVD.

    Singular values below rtol * (largest) count as zero.  If any
    singular value falls inside the guard band (cut/guard, cut*guard),
    the decision is ambiguous and raises rather than guessing.  Returns
    (rank, ToleranceRecord).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0, _emit(ToleranceRecord(context, 0, 0.0, 0.0, 0.0))
    s = np.linalg.svd(M, compute_uv=False)
    return rank_from_singular_values(s, rtol=rtol, guard=guard, context=context)


class SubspaceFrame:
    """A linear subspace given by an orthonormal basis (columns)."""

    __slots__ = ("ambient_dim", "basis", "rank", "record")

    def __init__(self, basis, record=None):
        basis = np.atleast_2d(np.asarray(basis, dtype=float))
        self.ambient_dim = basis.shape[0]
        self.basis = basis
        self.rank = basis.shape[1]
        self.record = record

    @classmethod
    def from_spanning(cls, cols, rtol=None, guard=10.0, context=""):
        """Orthonormalize a (possibly redundant) spanning set, calling the
        rank with a recorded tolerance.  cols: ambient_dim x n_vectors."""
        cols = np.atleast_2d(np.asarray(cols, dtype=float))
        if cols.shape[1] == 0:
            return cls(np.zeros((cols.shape[0], 0)),
                       ToleranceRecord(context, 0, 0.0, 0.0, 0.0))
        r, rec = rank_decide(cols, rtol=rtol, guard=guard, context=context)
        if r == 0:
            return cls(np.zeros((cols.shape[0], 0)), rec)
        U = np.linalg.svd(cols, full_matrices=False)[0]
        return cls(U[:, :r], rec)

    def project(self, v):
        v = np.asarray(v, dtype=float)
        return self.basis @ (self.basis.T @ v)

    def projector(self):
        return self.basis @ self.basis.T

    def residual(self, v):
        """Distance from v to the subspace, relative to |v|."""
        v = np.asarray(v, dtype=float)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        return float(np.linalg.norm(v - self.project(v)) / nv)

    def contains(self, v, tol=1e-8):
        return self.residual(v) <= tol

    def contains_all(self, cols, tol=1e-8):
        cols = np.atleast_2d(np.asarray(cols, dtype=float))
        return all(self.contains(cols[:, j], tol) for j in range(cols.shape[1]))

    def __repr__(self):
        return f"SubspaceFrame(dim {self.rank} in R^{self.ambient_dim})"


def null_space_of(M, rtol=None, guard=10.0, context=""):
    """Orthonormal basis of the kernel of M (right null space), with the
    rank decision recorded."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[1]
    if M.size == 0 or not np.any(M):
        rec = _emit(ToleranceRecord(context, 0, 0.0, 0.0, 0.0))
        return SubspaceFrame(np.eye(n), rec)
    r, rec = rank_decide(M, rtol=rtol, guard=guard, context=context)
    Vt = np.linalg.svd(M)[2]
    return SubspaceFrame(Vt[r:].T.copy(), rec)


def intersect(F1: SubspaceFrame, F2: SubspaceFrame, rtol=None, context=""):
    """Intersection of two subspaces given by orthonormal frames."""
    if F1.ambient_dim != F2.ambient_dim:
        raise InputError("frames live in different ambient spaces")
    if F1.rank == 0 or F2.rank == 0:
        return SubspaceFrame(np.zeros((F1.ambient_dim, 0)))
    # x in both spans: x = F1 a with F2-orthogonal part zero
    M = (np.eye(F1.ambient_dim) - F2.projector()) @ F1.basis
    ker = null_space_of(M, rtol=rtol, context=context or "intersection")
    basis = F1.basis @ ker.basis
    if basis.shape[1] == 0:
        return SubspaceFrame(np.zeros((F1.ambient_dim, 0)), ker.record)
    Q = np.linalg.qr(basis)[0]
    return SubspaceFrame(Q, ker.record)
