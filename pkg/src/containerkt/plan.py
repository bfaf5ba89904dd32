"""Leakage-safe gather indices and attention masks from container IDs.

Questions served in one task container are answered before any feedback is
shown, so no position may see outcome information from its own container run.
Two structures enforce that:

* ``shift_index[i]``: the recurrent state that position ``i`` reads is the one
  produced at the last position *before* its run starts (``-1``: none).
* ``allowed[i, j]``: query ``i`` may attend key ``j`` iff ``j`` lies in the
  ``window`` positions immediately preceding the start of ``i``'s run.

``allowed`` is stored with ``True`` meaning attendable.  :func:`blocked_mask`
renders the opposite convention (1 = blocked) used in printed masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ContainerPlan",
    "container_starts",
    "shift_indices",
    "attention_allowed",
    "gather_shifted",
    "build_plan",
    "reference_plan",
    "blocked_mask",
]


@dataclass(frozen=True)
class ContainerPlan:
    containers: tuple[int, ...]
    starts: np.ndarray  # (n,) int64
    shift_index: np.ndarray  # (n,) int64, -1 = no past
    allowed: np.ndarray  # (n, n) bool
    window: int

    def __len__(self) -> int:
        return len(self.containers)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ContainerPlan):
            return NotImplemented
        return (
            self.containers == other.containers
            and self.window == other.window
            and np.array_equal(self.starts, other.starts)
            and np.array_equal(self.shift_index, other.shift_index)
            and np.array_equal(self.allowed, other.allowed)
        )

    def to_dict(self) -> dict:
        return {
            "containers": list(self.containers),
            "window": self.window,
            "starts": self.starts.tolist(),
            "shift_index": self.shift_index.tolist(),
            "mask": blocked_mask(self.allowed).tolist(),
        }


def _as_array(containers: Sequence[int]) -> np.ndarray:
    arr = np.asarray(containers, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("containers must be a non-empty 1-D sequence")
    return arr


def container_starts(containers: Sequence[int]) -> np.ndarray:
    """Index where the run of equal adjacent IDs containing each position begins."""
    arr = _as_array(containers)
    is_start = np.ones(arr.size, dtype=bool)
    is_start[1:] = arr[1:] != arr[:-1]
    idx = np.where(is_start, np.arange(arr.size), 0)
    return np.maximum.accumulate(idx)


def shift_indices(containers: Sequence[int]) -> np.ndarray:
    return container_starts(containers) - 1


def attention_allowed(containers: Sequence[int], window: int) -> np.ndarray:
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    starts = container_starts(containers)
    j = np.arange(starts.size)[None, :]
    s = starts[:, None]
    return (j < s) & (j >= s - window)


def gather_shifted(states: np.ndarray, shift_index: Sequence[int]) -> np.ndarray:
    """Rows of ``states`` picked by ``shift_index``; index -1 yields a zero row."""
    states = np.asarray(states)
    idx = np.asarray(shift_index, dtype=np.int64)
    n = states.shape[0]
    if idx.size and (idx.min() < -1 or idx.max() >= n):
        raise IndexError(f"shift index out of range for {n} states")
    out = states[np.clip(idx, 0, None)].copy()
    out[idx < 0] = 0
    return out


def build_plan(containers: Sequence[int], window: int | None = None) -> ContainerPlan:
    """Plan for one sequence; ``window`` defaults to the sequence length (plain anti-leak causal mask)."""
    arr = _as_array(containers)
    if window is None:
        window = int(arr.size)
    starts = container_starts(arr)
    return ContainerPlan(
        containers=tuple(int(c) for c in arr),
        starts=starts,
        shift_index=starts - 1,
        allowed=attention_allowed(arr, window),
        window=window,
    )


def reference_plan(containers: Sequence[int], window: int | None = None) -> ContainerPlan:
    """Brute-force plan built cell by cell; kept as a test oracle for :func:`build_plan`."""
    seq = [int(c) for c in containers]
    n = len(seq)
    if n == 0:
        raise ValueError("containers must be a non-empty 1-D sequence")
    if window is None:
        window = n
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")

    # same[a][b]: every position between a and b (inclusive) holds the same id
    same = [[False] * n for _ in range(n)]
    for lo in range(n):
        hi = lo
        while hi < n and seq[hi] == seq[lo]:
            same[lo][hi] = same[hi][lo] = True
            hi += 1

    starts = []
    for i in range(n):
        s = i
        while s > 0 and same[s - 1][i]:
            s -= 1
        starts.append(s)

    shift = []
    for i in range(n):
        src = -1
        for j in range(i - 1, -1, -1):
            if not same[j][i]:
                src = j
                break
        shift.append(src)

    allowed = np.zeros((n, n), dtype=bool)
    for i in range(n):
        between = 0  # positions in [j, i) outside i's run
        for j in range(i - 1, -1, -1):
            if same[j][i]:
                continue
            between += 1
            allowed[i, j] = between <= window
    return ContainerPlan(
        containers=tuple(seq),
        starts=np.array(starts, dtype=np.int64),
        shift_index=np.array(shift, dtype=np.int64),
        allowed=allowed,
        window=window,
    )


def blocked_mask(allowed: np.ndarray) -> np.ndarray:
    """Integer mask with 1 = blocked, 0 = attendable."""
    return (~np.asarray(allowed, dtype=bool)).astype(np.int64)
