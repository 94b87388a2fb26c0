"""Synthetic few-shot episode generation and controlled task surgery.

Two distributions cover the experiments' needs:

* ``clustered`` -- each task draws its own Gaussian class centers and then
  Gaussian samples around them, so tasks are individually learnable and
  mutually distinct.
* ``noise``     -- features are i.i.d. standard normal and labels are
  assigned round-robin, so labels carry no feature information.

Degradation attenuates a seeded subset of sample features toward zero (the
feature-space analog of darkening images); augmentation applies seeded
random orthogonal rotations of feature space (the analog of rotating
images). Everything is a pure function of (spec, seed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .metalearn import Task
from .model import Batch

TASKSET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TaskDistributionSpec:
    """Episode distribution parameters.

    With ``center_pool_size`` unset, every clustered task draws its own
    class centers. When set, tasks draw their classes (without replacement)
    from a shared pool of that many centers, seeded by ``pool_seed``, with a
    task-specific label binding; distinct tasksets sharing a pool_seed then
    reuse the same underlying classes, the way few-shot episodes recycle
    categories under fresh class indices.
    """

    kind: str  # "clustered" | "noise"
    feature_dim: int
    n_ways: int
    k_support: int
    k_query: int
    class_center_scale: float = 1.0
    within_class_noise: float = 0.3
    seed: int = 0
    center_pool_size: int | None = None
    pool_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("clustered", "noise"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.n_ways < 2:
            raise ValueError("n_ways must be >= 2")
        if min(self.feature_dim, self.k_support, self.k_query) < 1:
            raise ValueError("dims and shot counts must be positive")
        if self.center_pool_size is not None and self.center_pool_size < self.n_ways:
            raise ValueError("center pool must hold at least n_ways centers")


@dataclass(frozen=True)
class DegradeParams:
    """alpha scales features toward zero; ratio is the fraction of samples hit."""

    alpha: float
    ratio: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.ratio <= 1.0):
            raise ValueError("alpha and ratio must lie in [0, 1]")


def _seed_for(base_seed: int, task_id: str) -> np.random.Generator:
    digest = hashlib.sha256(task_id.encode()).digest()
    return np.random.default_rng([base_seed, int.from_bytes(digest[:8], "little")])


def _center_pool(spec: TaskDistributionSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.pool_seed, spec.center_pool_size, spec.feature_dim])
    return rng.normal(0.0, spec.class_center_scale, size=(spec.center_pool_size, spec.feature_dim))


def _episode_batches(
    spec: TaskDistributionSpec, rng: np.random.Generator, pool: np.ndarray | None
) -> tuple[Batch, Batch]:
    d, ways = spec.feature_dim, spec.n_ways
    labels_s = np.repeat(np.arange(ways), spec.k_support)
    labels_q = np.repeat(np.arange(ways), spec.k_query)
    if spec.kind == "clustered":
        if pool is None:
            centers = rng.normal(0.0, spec.class_center_scale, size=(ways, d))
        else:
            centers = pool[rng.choice(pool.shape[0], size=ways, replace=False)]
        xs = centers[labels_s] + rng.normal(0.0, spec.within_class_noise, size=(labels_s.size, d))
        xq = centers[labels_q] + rng.normal(0.0, spec.within_class_noise, size=(labels_q.size, d))
    else:
        xs = rng.normal(0.0, 1.0, size=(labels_s.size, d))
        xq = rng.normal(0.0, 1.0, size=(labels_q.size, d))
    return Batch(xs, labels_s), Batch(xq, labels_q)


def sample_taskset(spec: TaskDistributionSpec, count: int, id_prefix: str | None = None) -> list[Task]:
    """Deterministic taskset of ``count`` episodes; ids are zero-padded."""
    if count < 0:
        raise ValueError("count must be non-negative")
    prefix = id_prefix if id_prefix is not None else spec.kind
    provenance = "noise" if spec.kind == "noise" else "regular"
    rng = np.random.default_rng(spec.seed)
    pool = None
    if spec.kind == "clustered" and spec.center_pool_size is not None:
        pool = _center_pool(spec)
    tasks = []
    for t in range(count):
        support, query = _episode_batches(spec, rng, pool)
        tasks.append(
            Task(task_id=f"{prefix}-{t:04d}", support=support, query=query, provenance=provenance)
        )
    return tasks


def degrade_task(task: Task, dp: DegradeParams, seed: int, parts: str = "both") -> Task:
    """Attenuate a seeded subset of samples' features by (1 - alpha).

    The subset is the first round(ratio * n) entries of a per-(task, seed)
    permutation, so for a fixed seed the degraded subsets are nested as the
    ratio grows. ``parts`` selects "support", "query", or "both".
    """
    if parts not in ("support", "query", "both"):
        raise ValueError(f"unknown parts {parts!r}")
    rng = _seed_for(seed, task.task_id)
    perms = {name: rng.permutation(getattr(task, name).n) for name in ("support", "query")}

    def _degrade(batch: Batch, perm: np.ndarray) -> Batch:
        x = batch.x.copy()
        n_hit = int(np.floor(dp.ratio * batch.n + 0.5))
        x[perm[:n_hit]] *= 1.0 - dp.alpha
        return Batch(x, batch.y.copy())

    support = _degrade(task.support, perms["support"]) if parts in ("support", "both") else task.support
    query = _degrade(task.query, perms["query"]) if parts in ("query", "both") else task.query
    return replace(task, support=support, query=query)


def _random_rotation(dim: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix that is the identity at scale 0 (Cayley transform)."""
    a = rng.standard_normal((dim, dim)) / np.sqrt(dim)
    t = 0.5 * scale * (a - a.T)
    eye = np.eye(dim)
    return np.linalg.solve(eye + t, eye - t)


def augment_group(task: Task, count: int, transform_scale: float, seed: int) -> list[Task]:
    """The task plus ``count - 1`` feature-rotated variants, sharing a group id."""
    if count < 1:
        raise ValueError("count must be >= 1")
    gid = task.group_id or task.task_id
    rng = _seed_for(seed, task.task_id)
    out = [replace(task, group_id=gid)]
    dim = task.support.x.shape[1]
    for v in range(1, count):
        rot = _random_rotation(dim, transform_scale, rng)
        out.append(
            replace(
                task,
                task_id=f"{task.task_id}-aug{v}",
                group_id=gid,
                support=Batch(task.support.x @ rot.T, task.support.y.copy()),
                query=Batch(task.query.x @ rot.T, task.query.y.copy()),
            )
        )
    return out


def mix_tasksets(regular: list[Task], noise: list[Task], seed: int) -> list[Task]:
    """Concatenate and shuffle; ids and provenance labels are preserved."""
    combined = list(regular) + list(noise)
    order = np.random.default_rng(seed).permutation(len(combined))
    return [combined[i] for i in order]


def save_taskset(path, tasks: list[Task], spec: TaskDistributionSpec | None = None) -> None:
    doc = {
        "version": TASKSET_FORMAT_VERSION,
        "spec": asdict(spec) if spec is not None else None,
        "tasks": [
            {
                "id": t.task_id,
                "group_id": t.group_id,
                "provenance": t.provenance,
                "support": {"x": t.support.x.tolist(), "y": t.support.y.tolist()},
                "query": {"x": t.query.x.tolist(), "y": t.query.y.tolist()},
            }
            for t in tasks
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_taskset(path) -> tuple[list[Task], TaskDistributionSpec | None]:
    """Read a taskset file; accepts externally produced files in the same schema."""
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("version")
    if version != TASKSET_FORMAT_VERSION:
        raise ValueError(f"unsupported taskset version {version!r}")
    tasks = []
    for entry in doc["tasks"]:
        tasks.append(
            Task(
                task_id=entry["id"],
                support=Batch(np.array(entry["support"]["x"]), np.array(entry["support"]["y"])),
                query=Batch(np.array(entry["query"]["x"]), np.array(entry["query"]["y"])),
                group_id=entry.get("group_id"),
                provenance=entry.get("provenance", "regular"),
            )
        )
    spec = None
    if doc.get("spec"):
        spec = TaskDistributionSpec(**doc["spec"])
    return tasks, spec
