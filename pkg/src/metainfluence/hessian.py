"""Curvature of the meta-objective, three ways, plus pruned pseudo-inverses.

* ``exact_meta_hessian``  -- central finite differences of the exact
  meta-gradient, column by column. The meta-gradient itself is analytic, so
  the only error is the controlled FD truncation; no third-order tensor is
  ever formed.
* ``gn_dense``            -- the positive-semidefinite outer-product term of
  the cross-entropy curvature, accumulated densely (the uncompressed oracle).
* ``accumulate_gn``       -- the same term kept as a factor V with
  V V^T ~= H, compressed after every task to a bounded orthogonal buffer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import linalg, model
from .linalg import FactorMatrix
from .metalearn import MetaParams, Task, _meta_grad, meta_output_jacobian

_HESSIAN_MAGIC = b"MIHS"
_HESSIAN_VERSION = 1

DENSE_CAP_DEFAULT = 2000
FD_STEP_SCALE = 1e-4
FD_ASYM_TOL = 1e-5


class FdAsymmetryError(RuntimeError):
    """Finite-difference columns disagree with their transpose beyond tolerance."""


@dataclass
class HessianRep:
    """Either a dense symmetric matrix or a factor V with V V^T ~= H."""

    variant: str  # "dense" | "factored"
    matrix: np.ndarray | None = None
    factor: FactorMatrix | None = None
    num_tasks: int = 0
    method: str = "exact"  # "exact" | "gauss_newton"
    buffer_capacity: int | None = None

    def __post_init__(self) -> None:
        if self.variant not in ("dense", "factored"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "dense" and self.matrix is None:
            raise ValueError("dense variant needs a matrix")
        if self.variant == "factored" and self.factor is None:
            raise ValueError("factored variant needs a factor")

    @property
    def dim(self) -> int:
        if self.variant == "dense":
            return int(self.matrix.shape[0])
        return self.factor.rows

    def dense_matrix(self) -> np.ndarray:
        """The represented matrix, materialized."""
        if self.variant == "dense":
            return self.matrix
        return self.factor.gram_sum()


@dataclass
class SpectralInverse:
    """Pruned pseudo-inverse H^+ together with the projector H^+ H."""

    pinv: np.ndarray
    projector: np.ndarray
    retained: int
    discarded_negative: int
    keep: int | float | str
    eigenvalues: np.ndarray | None = None
    clamped: bool = False

    @property
    def dim(self) -> int:
        return int(self.pinv.shape[0])


def exact_meta_hessian(
    mp: MetaParams,
    taskset: list[Task],
    dense_cap: int = DENSE_CAP_DEFAULT,
    step_scale: float = FD_STEP_SCALE,
) -> HessianRep:
    """Task-mean curvature of the adapted query loss at the current omega.

    Column j is the central difference of the mean meta-gradient along
    coordinate j with step ``step_scale * (1 + |omega_j|)``. The result is
    symmetrized after checking the raw asymmetry stays below FD_ASYM_TOL
    relative.
    """
    if not taskset:
        raise ValueError("taskset must be nonempty")
    q = mp.q
    if q > dense_cap:
        raise ValueError(f"q={q} exceeds dense cap {dense_cap}")
    learner = mp.learner
    omega = mp.omega
    work = omega.copy()
    h_mat = np.empty((q, q))
    m = len(taskset)
    for j in range(q):
        h = step_scale * (1.0 + abs(float(omega[j])))
        work[j] = omega[j] + h
        g_plus = _mean_meta_grad_checked(learner, work, taskset, j)
        work[j] = omega[j] - h
        g_minus = _mean_meta_grad_checked(learner, work, taskset, j)
        work[j] = omega[j]
        h_mat[:, j] = (g_plus - g_minus) / (2.0 * h)
    scale = max(float(np.abs(h_mat).max()), 1e-300)
    asym = float(np.abs(h_mat - h_mat.T).max())
    if asym > FD_ASYM_TOL * scale:
        raise FdAsymmetryError(
            f"pre-symmetrization asymmetry {asym:g} exceeds {FD_ASYM_TOL:g} * {scale:g}"
        )
    return HessianRep(
        variant="dense", matrix=linalg.symmetrize(h_mat), num_tasks=m, method="exact"
    )


def _mean_meta_grad_checked(learner, omega, taskset, coord: int) -> np.ndarray:
    total = np.zeros_like(omega)
    for task in taskset:
        g = _meta_grad(learner, omega, task)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite meta-gradient for task {task.task_id!r} at coordinate {coord}"
            )
        total += g
    return total / len(taskset)


def gn_columns_for_task(mp: MetaParams, task: Task, num_tasks: int = 1) -> FactorMatrix:
    """Factor columns of one task's outer-product curvature term.

    For each query sample the softmax curvature diag(s) - s s^T is factored
    with ``psd_sqrt_small`` and pushed through the transposed logit
    meta-Jacobian. Columns carry 1/sqrt(n_query * num_tasks) so that summing
    V V^T over a taskset reproduces the task-mean matrix. Saturated samples
    contribute nothing and zero factor columns are omitted.
    """
    logits, jac = meta_output_jacobian(mp, task)
    nq, c, q = jac.shape
    sm = model.softmax(logits)
    scale = 1.0 / np.sqrt(nq * num_tasks)
    blocks = []
    for n in range(nq):
        s = sm[n]
        a = np.diag(s) - np.outer(s, s)
        c_fac = linalg.psd_sqrt_small(a)
        col_norms = np.linalg.norm(c_fac, axis=0)
        c_fac = c_fac[:, col_norms > 0.0]
        if c_fac.shape[1] == 0:
            continue
        blocks.append((jac[n].T @ c_fac) * scale)
    if not blocks:
        return FactorMatrix.empty(q)
    return FactorMatrix(np.concatenate(blocks, axis=1))


def accumulate_gn(
    mp: MetaParams,
    taskset: list[Task],
    capacity: int,
    drop_tol: float | None = None,
) -> HessianRep:
    """Stream per-task factor columns through the bounded orthogonal buffer.

    Compression runs after every task (insertion order matters, so the loop
    is serial over the task index) and the final factor has at most
    ``capacity`` columns.
    """
    if not taskset:
        raise ValueError("taskset must be nonempty")
    buffer = FactorMatrix.empty(mp.q)
    m = len(taskset)
    for task in taskset:
        cols = gn_columns_for_task(mp, task, num_tasks=m)
        buffer = linalg.orthogonalize_keep_largest(buffer.concat(cols), capacity, drop_tol)
    return HessianRep(
        variant="factored",
        factor=buffer,
        num_tasks=m,
        method="gauss_newton",
        buffer_capacity=capacity,
    )


def gn_dense(mp: MetaParams, taskset: list[Task]) -> HessianRep:
    """Dense task-mean outer-product curvature (oracle for the factored path)."""
    if not taskset:
        raise ValueError("taskset must be nonempty")
    q = mp.q
    h = np.zeros((q, q))
    m = len(taskset)
    for task in taskset:
        logits, jac = meta_output_jacobian(mp, task)
        sm = model.softmax(logits)
        a = sm[:, :, None] * np.eye(sm.shape[1])[None, :, :] - np.einsum(
            "nk,nl->nkl", sm, sm
        )
        tmp = np.einsum("nkl,nlq->nkq", a, jac)
        h += np.einsum("nkq,nkr->qr", jac, tmp) / (task.query.n * m)
    return HessianRep(variant="dense", matrix=linalg.symmetrize(h), num_tasks=m, method="gauss_newton")


def invert(h: HessianRep, keep: int | float | str) -> SpectralInverse:
    """Pruned pseudo-inverse of a Hessian representation.

    Dense reps go through the full eigendecomposition; factored reps rotate
    the buffer columns into orthogonal directions and invert the ``keep``
    largest ones, never touching a q x q eigenproblem. A count larger than
    the available directions is clamped and flagged.
    """
    if h.variant == "dense":
        e = linalg.eigh_symmetric(h.matrix)
        clamped = isinstance(keep, (int, np.integer)) and not isinstance(keep, bool) and keep > e.dim
        idx = linalg.retained_indices(e.eigenvalues, keep)
        pinv = linalg.pseudo_inverse_spectral(e, keep)
        projector = linalg.projector_from_eigen(e, idx)
        neg_total = int(np.sum(e.eigenvalues < 0.0))
        neg_kept = int(np.sum(e.eigenvalues[idx] < 0.0))
        return SpectralInverse(
            pinv=pinv,
            projector=projector,
            retained=int(idx.size),
            discarded_negative=neg_total - neg_kept,
            keep=keep,
            eigenvalues=e.eigenvalues,
            clamped=bool(clamped),
        )
    cols = h.factor.columns
    q = h.factor.rows
    if cols.shape[1] == 0:
        zeros = np.zeros((q, q))
        return SpectralInverse(zeros, zeros.copy(), 0, 0, keep, np.zeros(0), False)
    rotated, norms, lam = linalg._rotate_to_orthogonal(cols)
    floor = linalg.FACTOR_ZERO_SCALE * float(norms.max())
    live = norms > floor
    rotated, norms, lam = rotated[:, live], norms[live], lam[live]
    clamped = isinstance(keep, (int, np.integer)) and not isinstance(keep, bool) and keep > norms.size
    idx = linalg.retained_indices(norms**2, keep)
    kept = rotated[:, idx]
    kn = norms[idx]
    scaled = kept / (kn * kn)
    pinv = linalg.symmetrize(scaled @ scaled.T)
    unit = kept / kn
    projector = linalg.symmetrize(unit @ unit.T)
    return SpectralInverse(
        pinv=pinv,
        projector=projector,
        retained=int(idx.size),
        discarded_negative=0,
        keep=keep,
        eigenvalues=norms**2,
        clamped=bool(clamped),
    )


def spectrum_summary(h: HessianRep) -> dict:
    """Eigenvalue digest used by reports: extremes and non-positive count."""
    if h.variant == "dense":
        e = linalg.eigh_symmetric(h.matrix)
        lam = e.eigenvalues
    else:
        _, norms, _ = linalg._rotate_to_orthogonal(h.factor.columns)
        lam = np.sort(norms**2)[::-1] if norms.size else np.zeros(0)
    return {
        "dim": h.dim,
        "method": h.method,
        "variant": h.variant,
        "num_eigenvalues": int(lam.size),
        "num_nonpositive": int(np.sum(lam <= 0.0)),
        "num_negative": int(np.sum(lam < 0.0)),
        "lambda_max": float(lam[0]) if lam.size else 0.0,
        "lambda_min": float(lam[-1]) if lam.size else 0.0,
    }


def save_hessian(path, h: HessianRep) -> None:
    """Binary layout: magic, version, variant, method, q, columns, capacity, tasks, then f64 payload."""
    variant_code = 0 if h.variant == "dense" else 1
    method_code = 0 if h.method == "exact" else 1
    if h.variant == "dense":
        payload = np.ascontiguousarray(h.matrix, dtype="<f8")
        cols = h.dim
    else:
        payload = np.ascontiguousarray(h.factor.columns, dtype="<f8")
        cols = h.factor.ncols
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", _HESSIAN_MAGIC, _HESSIAN_VERSION))
        fh.write(
            struct.pack(
                "<BBHQQQQ",
                variant_code,
                method_code,
                0,
                h.dim,
                cols,
                h.buffer_capacity or 0,
                h.num_tasks,
            )
        )
        fh.write(payload.tobytes())


def load_hessian(path) -> HessianRep:
    with open(path, "rb") as fh:
        magic, version = struct.unpack("<4sI", fh.read(8))
        if magic != _HESSIAN_MAGIC:
            raise ValueError(f"not a Hessian file: bad magic {magic!r}")
        if version != _HESSIAN_VERSION:
            raise ValueError(f"unsupported Hessian version {version}")
        variant_code, method_code, _, q, cols, capacity, num_tasks = struct.unpack(
            "<BBHQQQQ", fh.read(36)
        )
        data = np.frombuffer(fh.read(8 * q * cols), dtype="<f8").astype(float)
    variant = "dense" if variant_code == 0 else "factored"
    method = "exact" if method_code == 0 else "gauss_newton"
    if variant == "dense":
        return HessianRep(
            variant="dense",
            matrix=data.reshape(q, q),
            num_tasks=num_tasks,
            method=method,
        )
    return HessianRep(
        variant="factored",
        factor=FactorMatrix(data.reshape(q, cols)),
        num_tasks=num_tasks,
        method=method,
        buffer_capacity=capacity or None,
    )
