"""Dense symmetric linear algebra for the influence engine.

Everything operates on plain float64 numpy arrays. Symmetric matrices are
square arrays that are bitwise symmetric (run noisy data through
``symmetrize`` first). Low-rank representations are held as a
``FactorMatrix`` whose columns v_i stand for the outer-product sum
sum_i v_i v_i^T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Relative floor below which an eigenvalue counts as numerically zero when
# "positive" pruning is requested.
POSITIVE_FLOOR = 1e-12
# Inverting a retained eigenvalue below this relative magnitude is refused.
INVERT_FLOOR = 1e-12
# Default column drop tolerance, relative to the largest incoming column norm.
DROP_TOL_SCALE = 1e-9
# Gram eigenvalues at or below this relative level are indistinguishable from
# rounding noise of the Gram matrix itself and are always dropped.
GRAM_EIG_FLOOR = 1e-13
# pseudo_inverse_from_factor treats rotated columns with norm <= this scale
# times the largest norm as zero.
FACTOR_ZERO_SCALE = 1e-10


class EigenConvergenceError(RuntimeError):
    """The symmetric eigensolver failed to converge."""


class IllConditionedError(ValueError):
    """A retained eigenvalue is too small to invert safely."""


class NotPositiveSemidefiniteError(ValueError):
    """An input that must be PSD has a clearly negative eigenvalue."""


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return (a + a.T) / 2, which is bitwise symmetric in IEEE arithmetic."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return (a + a.T) / 2.0


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenpairs of a symmetric matrix.

    Eigenvalues are sorted descending in signed order (negative eigenvalues
    last); column i of ``eigenvectors`` pairs with ``eigenvalues[i]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.shape[0])

    def reconstruct(self, indices: np.ndarray | None = None) -> np.ndarray:
        """Rebuild Q_I Lambda_I Q_I^T over the given eigenpair indices (all by default)."""
        if indices is None:
            lam, q = self.eigenvalues, self.eigenvectors
        else:
            lam, q = self.eigenvalues[indices], self.eigenvectors[:, indices]
        if lam.size == 0:
            return np.zeros((self.dim, self.dim))
        return symmetrize((q * lam) @ q.T)


def eigh_symmetric(a: np.ndarray) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending.

    The input must be finite and symmetric up to 1e-8 relative; it is
    symmetrized exactly before factorization.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = float(np.abs(a).max()) if a.size else 0.0
    asym = float(np.abs(a - a.T).max())
    if asym > 1e-8 * max(scale, 1e-300):
        raise ValueError(f"matrix is not symmetric: max |a - a.T| = {asym:g}")
    a = symmetrize(a)
    try:
        w, q = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        off = a - np.diag(np.diag(a))
        resid = float(np.linalg.norm(off))
        raise EigenConvergenceError(
            f"eigendecomposition did not converge; off-diagonal Frobenius residual {resid:g}"
        ) from exc
    return EigenDecomposition(w[::-1].copy(), q[:, ::-1].copy())


def retained_indices(eigenvalues: np.ndarray, keep: int | float | str) -> np.ndarray:
    """Indices of eigenvalues treated as non-zero under a pruning rule.

    ``keep`` is one of:
      * int k      -- the k largest eigenvalues in signed descending order
                      (clamped to the available count);
      * float tau  -- every eigenvalue with |lam| >= tau * s, where s is the
                      largest eigenvalue magnitude;
      * "positive" -- every eigenvalue above POSITIVE_FLOOR * s;
      * "all"      -- every eigenvalue with |lam| above INVERT_FLOOR * s,
                      i.e. the plain inverse minus numerically-zero modes.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    n = lam.size
    if n == 0:
        return np.empty(0, dtype=int)
    scale = float(np.abs(lam).max())
    if scale == 0.0:
        return np.empty(0, dtype=int)
    if isinstance(keep, str):
        if keep == "positive":
            return np.flatnonzero(lam > POSITIVE_FLOOR * scale)
        if keep == "all":
            return np.flatnonzero(np.abs(lam) > INVERT_FLOOR * scale)
        raise ValueError(f"unknown keep rule {keep!r}")
    if isinstance(keep, (bool, np.bool_)):
        raise TypeError("keep must be an int count, float threshold, or rule name")
    if isinstance(keep, (int, np.integer)):
        if keep < 0:
            raise ValueError("keep count must be non-negative")
        return np.arange(min(int(keep), n))
    if isinstance(keep, (float, np.floating)):
        tau = float(keep)
        if tau < 0:
            raise ValueError("keep threshold must be non-negative")
        return np.flatnonzero(np.abs(lam) >= tau * scale)
    raise TypeError(f"unsupported keep specifier {keep!r}")


def pseudo_inverse_spectral(e: EigenDecomposition, keep: int | float | str) -> np.ndarray:
    """Spectral pseudo-inverse sum_retained q_i q_i^T / lam_i.

    Eigenvalues not retained (including negatives excluded by the rule)
    contribute zero. Retained negatives are inverted with their sign.
    Raises IllConditionedError when a retained eigenvalue is within
    INVERT_FLOOR of numerical zero relative to the spectrum scale.
    """
    idx = retained_indices(e.eigenvalues, keep)
    if idx.size == 0:
        return np.zeros((e.dim, e.dim))
    lam = e.eigenvalues[idx]
    scale = float(np.abs(e.eigenvalues).max())
    small = np.abs(lam) < INVERT_FLOOR * scale
    if small.any():
        worst = float(np.abs(lam[small]).min())
        raise IllConditionedError(
            f"retained eigenvalue {worst:g} is below {INVERT_FLOOR:g} * {scale:g}; "
            "ill-conditioned inversion requested"
        )
    q = e.eigenvectors[:, idx]
    return symmetrize((q / lam) @ q.T)


def projector_from_eigen(e: EigenDecomposition, indices: np.ndarray) -> np.ndarray:
    """Orthogonal projector onto the span of the given eigenvectors."""
    if indices.size == 0:
        return np.zeros((e.dim, e.dim))
    q = e.eigenvectors[:, indices]
    return symmetrize(q @ q.T)


def psd_sqrt_small(a: np.ndarray, neg_tol: float = 1e-10, zero_tol: float = 1e-12) -> np.ndarray:
    """Symmetric factor C with C C^T = a for a small PSD matrix.

    Eigendirections with eigenvalue below ``zero_tol`` produce zero columns;
    an eigenvalue below ``-neg_tol`` raises NotPositiveSemidefiniteError.
    Intended for class-count-sized matrices such as diag(s) - s s^T.
    """
    a = symmetrize(a)
    w, q = np.linalg.eigh(a)
    if w.size and float(w[0]) < -neg_tol:
        raise NotPositiveSemidefiniteError(f"eigenvalue {float(w[0]):g} below -{neg_tol:g}")
    w = np.where(w < zero_tol, 0.0, w)
    return q * np.sqrt(w)


@dataclass(frozen=True)
class FactorMatrix:
    """Columns v_i of a factor V representing sum_i v_i v_i^T = V V^T."""

    columns: np.ndarray

    def __post_init__(self) -> None:
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim != 2:
            raise ValueError(f"factor columns must be 2-D, got shape {cols.shape}")
        object.__setattr__(self, "columns", cols)

    @property
    def rows(self) -> int:
        return int(self.columns.shape[0])

    @property
    def ncols(self) -> int:
        return int(self.columns.shape[1])

    def gram_sum(self) -> np.ndarray:
        """Dense V V^T."""
        return symmetrize(self.columns @ self.columns.T)

    @staticmethod
    def empty(rows: int) -> "FactorMatrix":
        return FactorMatrix(np.zeros((rows, 0)))

    def concat(self, other: "FactorMatrix") -> "FactorMatrix":
        if other.rows != self.rows:
            raise ValueError(f"row mismatch: {self.rows} vs {other.rows}")
        return FactorMatrix(np.concatenate([self.columns, other.columns], axis=1))


def _rotate_to_orthogonal(cols: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rotate columns into the eigenbasis of their Gram matrix.

    Returns (rotated, norms, gram_eigenvalues) with norms descending. The
    rotation W = C O (O orthogonal) leaves W W^T = C C^T unchanged, which is
    what lets compression preserve the represented matrix.
    """
    g = symmetrize(cols.T @ cols)
    w, o = np.linalg.eigh(g)
    w = w[::-1]
    rotated = cols @ o[:, ::-1]
    norms = np.linalg.norm(rotated, axis=0)
    return rotated, norms, w


def orthogonalize_keep_largest(
    cols: FactorMatrix, capacity: int, drop_tol: float | None = None
) -> FactorMatrix:
    """Compress a factor to at most ``capacity`` mutually orthogonal columns.

    The columns are rotated into the eigenbasis of their Gram matrix (which
    preserves the outer-product sum exactly), columns with norm <= drop_tol
    are removed, and the ``capacity`` largest-norm columns are kept. A single
    re-orthogonalization pass keeps pairwise inner products at rounding level
    even for small retained columns. ``drop_tol`` defaults to
    DROP_TOL_SCALE times the largest incoming column norm.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    c = cols.columns
    if c.shape[1] == 0:
        return cols
    norms_in = np.linalg.norm(c, axis=0)
    max_in = float(norms_in.max())
    if max_in == 0.0:
        return FactorMatrix.empty(c.shape[0])
    if drop_tol is None:
        drop_tol = DROP_TOL_SCALE * max_in
    rotated, norms, w = _rotate_to_orthogonal(c)
    lam_floor = GRAM_EIG_FLOOR * max(float(w[0]), 0.0)
    keep = (norms > drop_tol) & (w > lam_floor)
    kept = rotated[:, keep][:, :capacity].copy()
    for i in range(1, kept.shape[1]):
        prev = kept[:, :i]
        coef = (prev.T @ kept[:, i]) / np.einsum("ij,ij->j", prev, prev)
        kept[:, i] -= prev @ coef
    if kept.shape[1]:
        kept = kept[:, np.linalg.norm(kept, axis=0) > drop_tol]
    return FactorMatrix(kept)


def pseudo_inverse_from_factor(v: FactorMatrix) -> np.ndarray:
    """Pseudo-inverse of V V^T without forming the dense matrix first.

    Diagonalizes V^T V = O Lambda O^T; the columns w_i of V O are orthogonal
    with |w_i|^2 equal to the nonzero eigenvalues of V V^T, so
    (V V^T)^+ = sum_{|w_i| > eps} w_i w_i^T / |w_i|^4 with
    eps = FACTOR_ZERO_SCALE * max |w_i|. Feasible when the column count is
    small compared to the row count.
    """
    c = v.columns
    q = c.shape[0]
    if c.shape[1] == 0:
        return np.zeros((q, q))
    rotated, norms, _ = _rotate_to_orthogonal(c)
    eps = FACTOR_ZERO_SCALE * float(norms.max())
    sel = norms > eps
    if not sel.any():
        return np.zeros((q, q))
    kept = rotated[:, sel]
    kn = norms[sel]
    scaled = kept / (kn * kn)
    return symmetrize(scaled @ scaled.T)
