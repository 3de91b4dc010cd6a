"""Fixed-capacity replay buffer with reservoir, k-means and mean-of-feature selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .taskstream import ImageTextPair

STRATEGIES = ("reservoir", "kmeans", "mof")


@dataclass
class ReplayBuffer:
    capacity: int
    entries: dict[int, list[ImageTextPair]] = field(default_factory=dict)
    seen_count: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def shares(self) -> dict[int, int]:
        return {t: len(v) for t, v in self.entries.items()}

    def pairs(self) -> list[ImageTextPair]:
        return [p for t in sorted(self.entries) for p in self.entries[t]]

    def check(self) -> None:
        if len(self) > self.capacity:
            raise AssertionError(f"buffer holds {len(self)} > capacity {self.capacity}")

    def to_record(self) -> dict:
        return {
            "capacity": self.capacity,
            "shares": {str(t): [p.pair_id for p in v] for t, v in self.entries.items()},
            "seen_count": {str(t): n for t, n in self.seen_count.items()},
        }

    @classmethod
    def from_record(cls, rec: dict, pairs_by_id: dict[int, ImageTextPair]) -> "ReplayBuffer":
        buf = cls(capacity=rec["capacity"])
        buf.entries = {int(t): [pairs_by_id[i] for i in ids] for t, ids in rec["shares"].items()}
        buf.seen_count = {int(t): n for t, n in rec["seen_count"].items()}
        return buf


def reservoir_update(
    slots: list, item, slot_budget: int, seen_count: int, rng: np.random.Generator
) -> int:
    """Offer the ``seen_count``-th item (1-based) of a stream to a reservoir of
    ``slot_budget`` slots.  Returns the updated count."""
    if slot_budget <= 0:
        return seen_count
    if seen_count <= slot_budget:
        slots.append(item)
    else:
        j = int(rng.integers(0, seen_count))
        if j < slot_budget:
            slots[j] = item
    return seen_count


def allocate_shares(capacity: int, task_sizes: dict[int, int]) -> dict[int, int]:
    """Equal split of ``capacity`` over tasks, capped by each task's size, with the
    surplus of small tasks redistributed.  Remainders go to the earliest tasks."""
    shares = {t: 0 for t in task_sizes}
    open_tasks = sorted(task_sizes)
    left = capacity
    while open_tasks and left > 0:
        base, extra = divmod(left, len(open_tasks))
        capped = [t for t in open_tasks if task_sizes[t] - shares[t] <= base]
        if capped:
            for t in capped:
                left -= task_sizes[t] - shares[t]
                shares[t] = task_sizes[t]
            open_tasks = [t for t in open_tasks if t not in capped]
            continue
        for i, t in enumerate(open_tasks):
            shares[t] += base + (1 if i < extra else 0)
        left = 0
    return shares


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[int(rng.integers(len(x)))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(x)))
        else:
            idx = int(rng.choice(len(x), p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.stack(centers)


def kmeans_select(
    features: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-6
) -> list[int]:
    """Lloyd's k-means (k-means++ seeding); the sample nearest each centroid.

    Returns ``k`` distinct indices.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if k > n:
        raise ValueError(f"cannot pick {k} samples out of {n}")
    if k <= 0:
        return []
    if k == n:
        return list(range(n))
    centers = _kmeans_pp(x, k, rng)
    for _ in range(max_iter):
        d = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        assign = d.argmin(1)
        new = centers.copy()
        for c in range(k):
            members = x[assign == c]
            if len(members):
                new[c] = members.mean(0)
        shift = float(np.abs(new - centers).max())
        centers = new
        if shift < tol:
            break
    d = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
    chosen: list[int] = []
    taken = np.zeros(n, dtype=bool)
    for c in range(k):
        # nearest not-yet-chosen sample keeps the selection size exact
        for idx in np.argsort(d[:, c], kind="stable"):
            if not taken[idx]:
                taken[idx] = True
                chosen.append(int(idx))
                break
    return chosen


def mof_select(features: np.ndarray, k: int) -> list[int]:
    """The ``k`` samples closest to the feature mean (ties broken by index)."""
    x = np.asarray(features, dtype=np.float64)
    if k > len(x):
        raise ValueError(f"cannot pick {k} samples out of {len(x)}")
    d = np.sqrt(((x - x.mean(0)) ** 2).sum(1))
    return [int(i) for i in np.argsort(d, kind="stable")[:k]]


def shrink_old_tasks(buffer: ReplayBuffer, shares: dict[int, int], rng: np.random.Generator) -> None:
    for t, share in shares.items():
        held = buffer.entries.get(t)
        if held is None or len(held) <= share:
            continue
        keep = np.sort(rng.choice(len(held), size=share, replace=False))
        buffer.entries[t] = [held[i] for i in keep]


def rebalance_buffer(
    buffer: ReplayBuffer,
    task_id: int,
    new_task_pairs: Sequence[ImageTextPair],
    strategy: str,
    rng: np.random.Generator,
    features: np.ndarray | None = None,
) -> None:
    """Give every seen task an equal share and fill the new task's share.

    ``reservoir`` keeps whatever the per-step reservoir gathered for
    ``task_id`` (drawing uniformly from ``new_task_pairs`` if nothing was
    gathered); ``kmeans`` and ``mof`` select from ``features`` of
    ``new_task_pairs``.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown buffer strategy {strategy!r}")
    sizes = {t: buffer.seen_count.get(t, len(v)) for t, v in buffer.entries.items()}
    sizes[task_id] = len(new_task_pairs)
    shares = allocate_shares(buffer.capacity, sizes)
    shrink_old_tasks(buffer, {t: s for t, s in shares.items() if t != task_id}, rng)
    k = shares[task_id]
    if strategy == "reservoir":
        held = buffer.entries.get(task_id, [])
        if not held and k:
            held = [new_task_pairs[i] for i in np.sort(rng.choice(len(new_task_pairs), k, replace=False))]
        elif len(held) > k:
            held = [held[i] for i in np.sort(rng.choice(len(held), k, replace=False))]
        chosen = held
    else:
        if features is None or len(features) != len(new_task_pairs):
            raise ValueError(f"{strategy} selection needs one feature row per new pair")
        idx = kmeans_select(features, k, rng) if strategy == "kmeans" else mof_select(features, k)
        chosen = [new_task_pairs[i] for i in idx]
    buffer.entries[task_id] = list(chosen)
    buffer.seen_count[task_id] = len(new_task_pairs)
    buffer.check()


def prepare_task(buffer: ReplayBuffer, task_id: int, task_size: int, rng: np.random.Generator) -> int:
    """Shrink old tasks to make room for ``task_id``; returns its slot budget."""
    sizes = {t: buffer.seen_count.get(t, len(v)) for t, v in buffer.entries.items() if t != task_id}
    sizes[task_id] = task_size
    shares = allocate_shares(buffer.capacity, sizes)
    shrink_old_tasks(buffer, {t: s for t, s in shares.items() if t != task_id}, rng)
    buffer.entries.setdefault(task_id, [])
    buffer.seen_count[task_id] = 0
    return shares[task_id]


def offer(buffer: ReplayBuffer, task_id: int, pair: ImageTextPair, budget: int, rng: np.random.Generator) -> None:
    """Per-step reservoir update for the current task."""
    n = buffer.seen_count.get(task_id, 0) + 1
    buffer.seen_count[task_id] = n
    reservoir_update(buffer.entries.setdefault(task_id, []), pair, budget, n, rng)
    buffer.check()


def sample_replay_batch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator, exclude_task: int | None = None) -> list[ImageTextPair]:
    pool = [p for t in sorted(buffer.entries) if t != exclude_task for p in buffer.entries[t]]
    if not pool or batch_size <= 0:
        return []
    if batch_size >= len(pool):
        return list(pool)
    idx = rng.choice(len(pool), size=batch_size, replace=False)
    return [pool[i] for i in idx]
