"""Influence of training tasks on meta-parameters, adapted weights, and test loss.

The per-task record is the vector -H^+ g_j, where g_j is the task's
meta-gradient at the trained optimum. Everything downstream (adapted-weight
influence, test-loss influence, rankings) is computed from stored records
alone, so the raw training tasks are not needed once records exist.

Sign convention for scores: helpful-positive. A positive score means
upweighting the training task is predicted to lower the test loss; this is
the negative of the raw test-loss derivative and it is recorded in every
report and table header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .hessian import SpectralInverse
from .metalearn import (
    AdaptResult,
    MetaParams,
    MetaTrainConfig,
    Task,
    adapt,
    adapt_jacobian_matvec,
    meta_grad,
    meta_train,
)
from . import model

_STORE_MAGIC = b"MIIR"
_STORE_VERSION = 1

HELPFUL_POSITIVE = -1.0  # score = HELPFUL_POSITIVE * d(test loss)/d(upweight)


@dataclass
class InfluenceRecord:
    """Influence of one training task (or group) on the meta-parameters."""

    task_id: str
    i_meta: np.ndarray
    group_id: str | None = None


def influence_meta(inv: SpectralInverse, mp: MetaParams, train_task: Task) -> InfluenceRecord:
    """-H^+ times the task's meta-gradient at the current meta-parameters."""
    g = meta_grad(mp, train_task)
    if g.shape[0] != inv.dim:
        raise ValueError(f"meta-gradient length {g.shape[0]} != inverse dim {inv.dim}")
    return InfluenceRecord(train_task.task_id, -(inv.pinv @ g), train_task.group_id)


def influence_group(records: list[InfluenceRecord], group_id: str) -> InfluenceRecord:
    """Summed influence of all records carrying ``group_id``, in list order."""
    members = [r for r in records if r.group_id == group_id]
    if not members:
        raise ValueError(f"no records with group_id {group_id!r}")
    total = members[0].i_meta.copy()
    for rec in members[1:]:
        total = total + rec.i_meta
    return InfluenceRecord(task_id=group_id, i_meta=total, group_id=group_id)


def influence_adapt(
    mp: MetaParams,
    test_task: Task,
    rec: InfluenceRecord,
    adapt_result: AdaptResult | None = None,
) -> np.ndarray:
    """Induced shift of the test task's adapted weights.

    Uses the materialized adaptation Jacobian when one is supplied, otherwise
    the matrix-free product (identical result).
    """
    if adapt_result is not None and adapt_result.jacobian is not None:
        return adapt_result.jacobian @ rec.i_meta
    return adapt_jacobian_matvec(mp, test_task, rec.i_meta)


def influence_perf(
    mp: MetaParams,
    test_task: Task,
    rec: InfluenceRecord,
    adapt_result: AdaptResult | None = None,
) -> float:
    """Induced change rate of the test task's query loss (positive = loss rises)."""
    shift = influence_adapt(mp, test_task, rec, adapt_result)
    spec = mp.learner.spec
    if mp.learner.kind == "protonet":
        # theta passes through adaptation, so the loss derivative w.r.t. the
        # weights is the full meta-gradient (query features and centroids).
        g_test = meta_grad(mp, test_task)
    else:
        theta = adapt(mp, test_task).theta_hat if adapt_result is None else adapt_result.theta_hat
        g_test = model.grad(spec, theta, test_task.query)
    return float(g_test @ shift)


@dataclass
class ScoreTable:
    """Scores and per-test rankings for every (test, train) pair.

    ``scores[i, j]`` is the helpful-positive score of train entity j on test
    task i; ``ranks[i, j]`` its rank in test i's descending-score order (0 =
    most helpful), ties broken by ascending train id.
    """

    test_ids: list[str]
    train_ids: list[str]
    scores: np.ndarray
    ranks: np.ndarray
    sign_convention: float = HELPFUL_POSITIVE

    def rank_of(self, test_id: str, train_id: str) -> int:
        i = self.test_ids.index(test_id)
        j = self.train_ids.index(train_id)
        return int(self.ranks[i, j])

    def score_of(self, test_id: str, train_id: str) -> float:
        i = self.test_ids.index(test_id)
        j = self.train_ids.index(train_id)
        return float(self.scores[i, j])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# sign_convention={self.sign_convention:g} (positive = helpful)\n")
            fh.write("test_id,train_id,score,rank\n")
            for i, tid in enumerate(self.test_ids):
                for j, jid in enumerate(self.train_ids):
                    fh.write(f"{tid},{jid},{self.scores[i, j]!r},{int(self.ranks[i, j])}\n")


def rank_rows(scores: np.ndarray, train_ids: list[str]) -> np.ndarray:
    """Per-row ranks, descending score, ties by ascending train id."""
    n_test, n_train = scores.shape
    id_order = np.argsort(np.argsort(np.asarray(train_ids, dtype=object), kind="stable"))
    ranks = np.empty((n_test, n_train), dtype=int)
    for i in range(n_test):
        order = np.lexsort((id_order, -scores[i]))
        ranks[i, order] = np.arange(n_train)
    return ranks


def score_pairs(
    mp: MetaParams,
    records: list[InfluenceRecord],
    test_tasks: list[Task],
    sign_convention: float = HELPFUL_POSITIVE,
) -> np.ndarray:
    """Score matrix (tests x records) from stored records.

    Relies on the adaptation Jacobian being symmetric (MAML) or the identity
    (protonet), which folds the loss-gradient/adaptation chain into the test
    task's meta-gradient; tests verify agreement with the composed form.
    """
    if not records:
        raise ValueError("need at least one influence record")
    stack = np.stack([r.i_meta for r in records], axis=1)
    scores = np.empty((len(test_tasks), len(records)))
    for i, task in enumerate(test_tasks):
        u = meta_grad(mp, task)
        scores[i] = sign_convention * (u @ stack)
    return scores


def score_table(
    mp: MetaParams,
    inv: SpectralInverse,
    train_tasks: list[Task],
    test_tasks: list[Task],
    sign_convention: float = HELPFUL_POSITIVE,
    records: list[InfluenceRecord] | None = None,
) -> ScoreTable:
    """Full influence score table; records are computed when not supplied."""
    if records is None:
        records = [influence_meta(inv, mp, t) for t in train_tasks]
    train_ids = [r.task_id for r in records]
    scores = score_pairs(mp, records, test_tasks, sign_convention)
    ranks = rank_rows(scores, train_ids)
    return ScoreTable(
        test_ids=[t.task_id for t in test_tasks],
        train_ids=train_ids,
        scores=scores,
        ranks=ranks,
        sign_convention=sign_convention,
    )


def loo_retrain_oracle(
    mp0: MetaParams,
    taskset: list[Task],
    cfg: MetaTrainConfig,
    j: int,
    epsilon: float,
    base_omega: np.ndarray | None = None,
) -> np.ndarray:
    """Finite-difference ground truth for the parameter influence of task j.

    Re-runs meta-training with task j upweighted by ``epsilon`` under the
    identical seed and schedule and returns (omega_eps - omega) / epsilon.
    ``base_omega`` may carry the unperturbed run's result to avoid repeating
    it across calls; it must come from the same (mp0, taskset, cfg).
    """
    if base_omega is None:
        base_omega = meta_train(mp0, taskset, cfg)[0].omega
    bumped, _ = meta_train(mp0, taskset, cfg, upweight=(j, epsilon))
    return (bumped.omega - base_omega) / epsilon


def save_influence_records(path, records: list[InfluenceRecord]) -> None:
    """Binary store: header, id table, then the row-major f64 record matrix."""
    if not records:
        raise ValueError("nothing to save")
    q = records[0].i_meta.size
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", _STORE_MAGIC, _STORE_VERSION))
        fh.write(struct.pack("<QQ", len(records), q))
        for rec in records:
            tid = rec.task_id.encode()
            gid = (rec.group_id or "").encode()
            fh.write(struct.pack("<I", len(tid)) + tid)
            fh.write(struct.pack("<I", len(gid)) + gid)
        mat = np.stack([r.i_meta for r in records], axis=0)
        fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def load_influence_records(path) -> list[InfluenceRecord]:
    with open(path, "rb") as fh:
        magic, version = struct.unpack("<4sI", fh.read(8))
        if magic != _STORE_MAGIC:
            raise ValueError(f"not an influence store: bad magic {magic!r}")
        if version != _STORE_VERSION:
            raise ValueError(f"unsupported influence store version {version}")
        count, q = struct.unpack("<QQ", fh.read(16))
        ids = []
        for _ in range(count):
            (tlen,) = struct.unpack("<I", fh.read(4))
            tid = fh.read(tlen).decode()
            (glen,) = struct.unpack("<I", fh.read(4))
            gid = fh.read(glen).decode() if glen else None
            ids.append((tid, gid))
        mat = np.frombuffer(fh.read(8 * count * q), dtype="<f8").astype(float).reshape(count, q)
    return [InfluenceRecord(tid, mat[i].copy(), gid) for i, (tid, gid) in enumerate(ids)]
