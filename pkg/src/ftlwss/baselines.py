"""Sparsity-aware simultaneous orthogonal matching pursuit (SOMP).

Greedy joint-sparse support recovery over the multicoset measurement model:
given the coset spectra Y (P x N) and a measurement matrix A (P x L), pick
one column per iteration, jointly re-fit the selected columns by least
squares, subtract, and repeat until the prescribed sparsity is reached. The
true occupancy count is assumed known (sparsity-aware operation).

Two atom-selection rules are provided:

- ``rank_aware`` (default): correlate the projected, re-normalized atoms
  against the dominant subspace of the residual, truncated to the remaining
  sparsity. Because the snapshots give the row-sparse spectra full row rank,
  this rule recovers every identifiable noiseless support (sparsity below
  the coset count, full-spark matrix) exactly, and the subspace truncation
  keeps it the stronger rule under noise as well.
- ``correlation``: the textbook rule, largest row-l2 norm of A^H R.

Support indices are 1-based column indices of the matrix that was passed in;
converting them to physical band indices is the caller's concern (see
``multicoset.band_order``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Tikhonov ridge on the normal equations, relative to the Gram diagonal;
# submatrices of the roots-of-unity measurement matrix are well conditioned,
# this only guards the degenerate selections of the over-sparse regime.
_LS_RIDGE = 1e-12

# singular values below this fraction of the largest are excluded from the
# residual's column-space basis
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class SompResult:
    support: tuple[int, ...]          # 1-based column indices, in selection order
    residual_norm: float
    iterations: int
    infeasible_sparsity: bool = False # sparsity exceeded the coset count

    def occupancy(self, n_subbands: int) -> np.ndarray:
        bits = np.zeros(n_subbands, dtype=np.int8)
        for idx in self.support:
            bits[idx - 1] = 1
        return bits


def _least_squares(sub: np.ndarray, y: np.ndarray) -> np.ndarray:
    gram = sub.conj().T @ sub
    ridge = _LS_RIDGE * float(np.abs(np.diag(gram)).mean())
    gram += max(ridge, np.finfo(float).tiny) * np.eye(sub.shape[1])
    return np.linalg.solve(gram, sub.conj().T @ y)


def somp_detect(
    coset_spectra: np.ndarray,
    matrix: np.ndarray,
    sparsity: int,
    selection: str = "rank_aware",
) -> SompResult:
    """Recover the ``sparsity`` strongest columns jointly explaining Y.

    With sparsity above the number of cosets the least-squares subproblem is
    underdetermined; the result is still produced (best effort) and flagged
    ``infeasible_sparsity``.
    """
    if selection not in ("rank_aware", "correlation"):
        raise ValueError(f"unknown selection rule {selection!r}")
    a = np.asarray(matrix)
    y = np.asarray(coset_spectra)
    if a.ndim != 2 or y.ndim != 2 or a.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible shapes: matrix {a.shape}, spectra {y.shape}")
    n_cosets, n_cols = a.shape
    if sparsity < 0 or sparsity > n_cols:
        raise ValueError(f"sparsity must lie in [0, {n_cols}], got {sparsity}")

    if sparsity == 0:
        return SompResult((), float(np.linalg.norm(y)), 0)

    residual = y
    selected: list[int] = []
    for _ in range(sparsity):
        if selection == "rank_aware":
            scores = _rank_aware_scores(a, residual, selected, sparsity - len(selected))
        else:
            corr = a.conj().T @ residual
            scores = (np.abs(corr) ** 2).sum(axis=1)
        if selected:
            scores[np.asarray(selected)] = -np.inf
        pick = int(np.argmax(scores))  # argmax takes the lowest index on ties
        selected.append(pick)
        sub = a[:, selected]
        residual = y - sub @ _least_squares(sub, y)

    return SompResult(
        support=tuple(i + 1 for i in selected),
        residual_norm=float(np.linalg.norm(residual)),
        iterations=sparsity,
        infeasible_sparsity=sparsity > n_cosets,
    )


def _rank_aware_scores(a: np.ndarray, residual: np.ndarray, selected: list[int],
                       remaining: int) -> np.ndarray:
    """Correlation of each projected-normalized atom with the residual's
    dominant column space, truncated to the number of atoms still to be
    selected so noise directions never flood the basis. Scale-invariant in
    the residual by construction.
    """
    u, s, _ = np.linalg.svd(residual, full_matrices=False)
    rank = int((s > _RANK_TOL * (s[0] if s.size else 1.0)).sum())
    # a basis spanning the whole measurement space scores every atom equally,
    # so always leave at least one dimension out (only binds when the
    # requested sparsity reaches the coset count, where the support is not
    # identifiable anyway)
    rank = min(rank, remaining, residual.shape[0] - 1)
    if rank == 0:
        return np.zeros(a.shape[1])
    basis = u[:, :rank]
    if selected:
        sub = a[:, selected]
        q, _ = np.linalg.qr(sub)
        atoms = a - q @ (q.conj().T @ a)
    else:
        atoms = a
    norms = np.linalg.norm(atoms, axis=0)
    safe = np.where(norms > 1e-12, norms, np.inf)
    return (np.abs(basis.conj().T @ atoms) ** 2).sum(axis=0) / safe**2
