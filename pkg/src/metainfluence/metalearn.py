"""Adaptation algorithms, meta-gradients, and the Adam meta-training loop.

Two learners share one parameter layout (the meta-parameter vector has the
same length as the model weight vector):

* ``maml``     -- adaptation is one gradient step on the support set with a
                  fixed inner learning rate; the adaptation Jacobian is
                  I - lr * H_support, which is symmetric.
* ``protonet`` -- weights pass through unchanged; class centroids are the
                  mean support embeddings and query logits are negative
                  squared Euclidean distances to them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import model
from .model import Batch, MlpSpec

LEARNER_KINDS = ("maml", "protonet")

_PARAMS_MAGIC = b"MIMP"
_PARAMS_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Meta-training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class Learner:
    kind: str
    spec: MlpSpec
    inner_lr: float = 0.01

    def __post_init__(self) -> None:
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.kind == "maml" and self.inner_lr < 0:
            raise ValueError("inner_lr must be non-negative")


@dataclass(frozen=True)
class Task:
    """One few-shot episode: a support batch to adapt on, a query batch to score."""

    task_id: str
    support: Batch
    query: Batch
    group_id: str | None = None
    provenance: str = "regular"

    def __post_init__(self) -> None:
        if self.support.x.shape[1] != self.query.x.shape[1]:
            raise ValueError("support and query feature dims differ")

    @property
    def n_ways(self) -> int:
        return int(max(self.support.y.max(), self.query.y.max())) + 1


@dataclass
class MetaParams:
    omega: np.ndarray
    learner: Learner

    def __post_init__(self) -> None:
        omega = np.asarray(self.omega, dtype=float)
        if omega.shape != (self.learner.spec.num_params,):
            raise ValueError(
                f"omega length {omega.shape} != parameter count {self.learner.spec.num_params}"
            )
        self.omega = omega

    @property
    def q(self) -> int:
        return int(self.omega.size)


@dataclass
class AdaptResult:
    theta_hat: np.ndarray
    jacobian: np.ndarray | None = None


def _class_counts(y: np.ndarray, n_ways: int) -> np.ndarray:
    return np.bincount(y, minlength=n_ways)


def _proto_centroids(spec: MlpSpec, feats: np.ndarray, y: np.ndarray, n_ways: int) -> np.ndarray:
    counts = _class_counts(y, n_ways)
    if (counts == 0).any():
        missing = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"support set has no samples for class {missing}")
    cents = np.zeros((n_ways, feats.shape[1]))
    np.add.at(cents, y, feats)
    return cents / counts[:, None]


def _proto_logits(spec: MlpSpec, omega: np.ndarray, task: Task):
    """Negative squared distances to support centroids, plus intermediates."""
    f_s = model.forward(spec, omega, task.support.x)
    f_q = model.forward(spec, omega, task.query.x)
    cents = _proto_centroids(spec, f_s, task.support.y, task.n_ways)
    diff = f_q[:, None, :] - cents[None, :, :]
    logits = -np.einsum("nke,nke->nk", diff, diff)
    return logits, f_s, f_q, cents, diff


def adapt(mp: MetaParams, task: Task, want_jacobian: bool = False) -> AdaptResult:
    """Run the learner's adaptation; optionally materialize d theta_hat / d omega."""
    spec = mp.learner.spec
    if mp.learner.kind == "protonet":
        # weights pass through; centroid construction validates the support set
        feats = model.forward(spec, mp.omega, task.support.x)
        _proto_centroids(spec, feats, task.support.y, task.n_ways)
        jac = np.eye(mp.q) if want_jacobian else None
        return AdaptResult(mp.omega.copy(), jac)
    lr = mp.learner.inner_lr
    g = model.grad(spec, mp.omega, task.support)
    theta = mp.omega - lr * g
    jac = None
    if want_jacobian:
        jac = np.eye(mp.q) - lr * model.hvp(spec, mp.omega, task.support, np.eye(mp.q))
    return AdaptResult(theta, jac)


def adapt_jacobian_matvec(mp: MetaParams, task: Task, v: np.ndarray) -> np.ndarray:
    """(d theta_hat / d omega) @ v without materializing the Jacobian.

    For MAML the Jacobian is symmetric, so this is also the transposed
    product. Accepts a single vector (p,) or a stack (p, k).
    """
    if mp.learner.kind == "protonet":
        return np.array(v, dtype=float, copy=True)
    lr = mp.learner.inner_lr
    return v - lr * model.hvp(mp.learner.spec, mp.omega, task.support, v)


def task_logits(mp: MetaParams, task: Task) -> np.ndarray:
    """Query logits after adaptation."""
    if mp.learner.kind == "protonet":
        return _proto_logits(mp.learner.spec, mp.omega, task)[0]
    theta = adapt(mp, task).theta_hat
    return model.forward(mp.learner.spec, theta, task.query.x)


def meta_loss(mp: MetaParams, task: Task) -> float:
    """Query loss after adaptation (the outer-loop objective for one task)."""
    return model.cross_entropy(task_logits(mp, task), task.query.y)


def meta_accuracy(mp: MetaParams, task: Task) -> float:
    logits = task_logits(mp, task)
    return float(np.mean(logits.argmax(axis=1) == task.query.y))


def _proto_meta_grad(spec: MlpSpec, omega: np.ndarray, task: Task) -> np.ndarray:
    logits, f_s, f_q, cents, diff = _proto_logits(spec, omega, task)
    nq = task.query.n
    n_ways = task.n_ways
    s = model.softmax(logits)
    coeff = s.copy()
    coeff[np.arange(nq), task.query.y] -= 1.0
    coeff /= nq

    j_q = model.output_jacobian(spec, omega, task.query)
    j_s = model.output_jacobian(spec, omega, task.support)
    jbar = np.empty((n_ways, f_s.shape[1], omega.size))
    for k in range(n_ways):
        jbar[k] = j_s[task.support.y == k].mean(axis=0)

    term_q = np.einsum("nk,nke,nep->p", coeff, diff, j_q)
    term_s = np.einsum("nk,nke,kep->p", coeff, diff, jbar)
    return -2.0 * (term_q - term_s)


def _meta_grad(learner: Learner, omega: np.ndarray, task: Task) -> np.ndarray:
    spec = learner.spec
    if learner.kind == "protonet":
        return _proto_meta_grad(spec, omega, task)
    lr = learner.inner_lr
    if lr == 0.0:
        return model.grad(spec, omega, task.query)
    g_sup = model.grad(spec, omega, task.support)
    theta = omega - lr * g_sup
    g_q = model.grad(spec, theta, task.query)
    return g_q - lr * model.hvp(spec, omega, task.support, g_q)


def meta_grad(mp: MetaParams, task: Task) -> np.ndarray:
    """Exact gradient of the adapted query loss with respect to the meta-parameters."""
    return _meta_grad(mp.learner, mp.omega, task)


def meta_output_jacobian(mp: MetaParams, task: Task) -> tuple[np.ndarray, np.ndarray]:
    """Query logits and their Jacobian w.r.t. the meta-parameters, (n, c, q).

    For MAML this chains the adapted-weight logit Jacobian through the
    adaptation Jacobian; for protonet the logits are centroid distances, so
    both query and support embeddings contribute.
    """
    spec = mp.learner.spec
    if mp.learner.kind == "protonet":
        logits, f_s, f_q, cents, diff = _proto_logits(spec, mp.omega, task)
        j_q = model.output_jacobian(spec, mp.omega, task.query)
        j_s = model.output_jacobian(spec, mp.omega, task.support)
        n_ways = task.n_ways
        jbar = np.empty((n_ways, f_s.shape[1], mp.q))
        for k in range(n_ways):
            jbar[k] = j_s[task.support.y == k].mean(axis=0)
        jac = -2.0 * (
            np.einsum("nke,nep->nkp", diff, j_q) - np.einsum("nke,kep->nkp", diff, jbar)
        )
        return logits, jac
    theta = adapt(mp, task).theta_hat
    logits = model.forward(spec, theta, task.query.x)
    j_out = model.output_jacobian(spec, theta, task.query)
    n, c, p = j_out.shape
    flat = j_out.reshape(n * c, p).T
    chained = adapt_jacobian_matvec(mp, task, flat)
    return logits, chained.T.reshape(n, c, p)


@dataclass(frozen=True)
class MetaTrainConfig:
    steps: int
    meta_batch: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)
    final_loss: float = float("nan")
    final_accuracy: float = float("nan")

    def to_jsonl(self) -> str:
        lines = [json.dumps(e, sort_keys=True) for e in self.entries]
        lines.append(
            json.dumps(
                {"final_loss": self.final_loss, "final_accuracy": self.final_accuracy},
                sort_keys=True,
            )
        )
        return "\n".join(lines) + "\n"


def meta_train(
    mp0: MetaParams,
    taskset: list[Task],
    cfg: MetaTrainConfig,
    upweight: tuple[int, float] | None = None,
) -> tuple[MetaParams, TrainLog]:
    """Adam on the mean adapted query loss over sampled meta-batches.

    Tasks are sampled with replacement per batch from a PCG64 generator
    seeded with ``cfg.seed``, so a run is a pure function of its inputs.
    ``upweight=(j, eps)`` multiplies task j's loss by (1 + eps * M) whenever
    it is sampled, which in expectation adds eps * L_j to the objective.
    Weight decay adds wd * |omega|^2 / 2.
    """
    if not taskset:
        raise ValueError("taskset must be nonempty")
    learner = mp0.learner
    m_tasks = len(taskset)
    weights = np.ones(m_tasks)
    if upweight is not None:
        j, eps = upweight
        weights[j] += eps * m_tasks

    rng = np.random.default_rng(cfg.seed)
    omega = mp0.omega.copy()
    m = np.zeros_like(omega)
    v = np.zeros_like(omega)
    log = TrainLog()

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, m_tasks, size=cfg.meta_batch)
        g = np.zeros_like(omega)
        batch_loss = 0.0
        for i in idx:
            task = taskset[i]
            wi = weights[i]
            li, gi = _meta_loss_and_grad(learner, omega, task)
            batch_loss += wi * li
            g += wi * gi
        g /= cfg.meta_batch
        batch_loss /= cfg.meta_batch
        if cfg.weight_decay:
            g += cfg.weight_decay * omega
            batch_loss += 0.5 * cfg.weight_decay * float(omega @ omega)
        if not np.isfinite(batch_loss) or not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite loss or gradient at step {step}")

        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        mhat = m / (1.0 - cfg.beta1**step)
        vhat = v / (1.0 - cfg.beta2**step)
        omega -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        log.entries.append(
            {"step": step, "loss": float(batch_loss), "grad_norm": float(np.linalg.norm(g))}
        )

    mp = MetaParams(omega, learner)
    losses = [meta_loss(mp, t) for t in taskset]
    accs = [meta_accuracy(mp, t) for t in taskset]
    log.final_loss = float(np.mean(losses))
    log.final_accuracy = float(np.mean(accs))
    return mp, log


def _meta_loss_and_grad(learner: Learner, omega: np.ndarray, task: Task) -> tuple[float, np.ndarray]:
    spec = learner.spec
    if learner.kind == "protonet":
        logits = _proto_logits(spec, omega, task)[0]
        return model.cross_entropy(logits, task.query.y), _proto_meta_grad(spec, omega, task)
    lr = learner.inner_lr
    if lr == 0.0:
        return model.loss_and_grad(spec, omega, task.query)
    g_sup = model.grad(spec, omega, task.support)
    theta = omega - lr * g_sup
    loss_q, g_q = model.loss_and_grad(spec, theta, task.query)
    return loss_q, g_q - lr * model.hvp(spec, omega, task.support, g_q)


def total_meta_gradient_norm(mp: MetaParams, taskset: list[Task]) -> float:
    """Norm of the taskset-mean meta-gradient; near zero at a trained optimum."""
    if not taskset:
        raise ValueError("taskset must be nonempty")
    g = np.zeros(mp.q)
    for task in taskset:
        g += meta_grad(mp, task)
    return float(np.linalg.norm(g / len(taskset)))


def save_params(path, mp: MetaParams) -> None:
    """Binary MetaParams file: header, spec, then the little-endian f64 vector."""
    spec = mp.learner.spec
    acts = ",".join(spec.activation).encode()
    widths = spec.layer_widths
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", _PARAMS_MAGIC, _PARAMS_VERSION))
        kind_code = LEARNER_KINDS.index(mp.learner.kind)
        fh.write(struct.pack("<Bd", kind_code, mp.learner.inner_lr))
        fh.write(struct.pack("<I", len(acts)) + acts)
        fh.write(struct.pack("<I", len(widths)))
        fh.write(struct.pack(f"<{len(widths)}Q", *widths))
        fh.write(struct.pack("<Q", mp.q))
        fh.write(np.ascontiguousarray(mp.omega, dtype="<f8").tobytes())


def load_params(path) -> MetaParams:
    with open(path, "rb") as fh:
        magic, version = struct.unpack("<4sI", fh.read(8))
        if magic != _PARAMS_MAGIC:
            raise ValueError(f"not a MetaParams file: bad magic {magic!r}")
        if version != _PARAMS_VERSION:
            raise ValueError(f"unsupported MetaParams version {version}")
        kind_code, inner_lr = struct.unpack("<Bd", fh.read(9))
        (alen,) = struct.unpack("<I", fh.read(4))
        acts = tuple(fh.read(alen).decode().split(",")) if alen else ()
        (nw,) = struct.unpack("<I", fh.read(4))
        widths = struct.unpack(f"<{nw}Q", fh.read(8 * nw))
        (q,) = struct.unpack("<Q", fh.read(8))
        omega = np.frombuffer(fh.read(8 * q), dtype="<f8").astype(float)
    spec = MlpSpec(widths, acts if acts else "tanh")
    learner = Learner(LEARNER_KINDS[kind_code], spec, inner_lr)
    return MetaParams(omega, learner)
