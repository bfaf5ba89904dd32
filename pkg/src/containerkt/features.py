"""Per-position features: query, memory and streaming hand-crafted aggregates.

Query features are known before the student answers, and memory features only
after.  Hand-crafted features summarise the user's entire past.  They are
maintained by a :class:`UserAggregateState` that buffers the open container
and folds it into the counters only when the next container run begins, so a
position never sees outcomes from its own container.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .events import InteractionEvent, LectureType, Metadata, UserHistory

__all__ = [
    "STANDARDIZED",
    "FeatureConfig",
    "QueryFeatures",
    "FeatureTensors",
    "UserAggregateState",
    "fit_standardization",
    "query_columns",
    "memory_columns",
    "handcrafted_layout",
    "compute_query_features",
    "compute_memory_features",
    "commit_container",
    "snapshot_handcrafted",
    "stream_user",
    "user_features",
]

STANDARDIZED = ("time_delta", "log_timestamp", "elapsed_time")
N_PARTS = 7
N_ANSWERS = 4
N_LECTURE_TYPES = len(LectureType)
MEMORY_WIDTH = 3 + 3 + 1 + (N_ANSWERS + 1)


@dataclass
class FeatureConfig:
    n_questions: int
    n_tags: int
    seq_len: int
    n_parts: int = N_PARTS
    n_answers: int = N_ANSWERS
    container_delta_divisor: float = 1000.0
    standardization: dict[str, tuple[float, float]] = field(default_factory=dict)
    ratio_default: float = 0.0
    count_transform: str = "log1p"
    tag_mode: str = "current"
    max_question_tags: int = 6
    target_width: int | None = None

    def __post_init__(self) -> None:
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.n_parts != N_PARTS or self.n_answers != N_ANSWERS:
            raise ValueError("n_parts and n_answers are fixed at 7 and 4")
        if self.count_transform not in ("log1p", "raw"):
            raise ValueError(f"count_transform must be 'log1p' or 'raw', got {self.count_transform!r}")
        if self.tag_mode not in ("current", "all"):
            raise ValueError(f"tag_mode must be 'current' or 'all', got {self.tag_mode!r}")
        self.standardization = {k: (float(m), float(s)) for k, (m, s) in self.standardization.items()}
        for name, (_, std) in self.standardization.items():
            if not std > 0:
                raise ValueError(f"standardization std for {name} must be > 0")

    def standardize(self, name: str, value: float) -> float:
        try:
            mean, std = self.standardization[name]
        except KeyError:
            raise KeyError(f"no standardization statistics for {name!r}; run fit_standardization") from None
        return (value - mean) / std

    def to_dict(self) -> dict:
        d = asdict(self)
        d["standardization"] = {k: list(v) for k, v in self.standardization.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        d = dict(d)
        d["standardization"] = {k: tuple(v) for k, v in d.get("standardization", {}).items()}
        return cls(**d)


# --------------------------------------------------------------------------- standardization


def _raw_scalars(history: UserHistory) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {k: [] for k in STANDARDIZED}
    prev_ts = None
    for e in history.events:
        out["time_delta"].append(float(e.timestamp_ms - prev_ts) if prev_ts is not None else 0.0)
        out["log_timestamp"].append(math.log1p(e.timestamp_ms))
        if e.elapsed_time_ms is not None:
            out["elapsed_time"].append(float(e.elapsed_time_ms))
        prev_ts = e.timestamp_ms
    return out


def fit_standardization(histories: Iterable[UserHistory]) -> dict[str, tuple[float, float]]:
    """Mean and population std of each standardized raw feature over all positions where it is defined."""
    pooled: dict[str, list[float]] = {k: [] for k in STANDARDIZED}
    for h in histories:
        for k, vals in _raw_scalars(h).items():
            pooled[k].extend(vals)
    stats = {}
    for name in STANDARDIZED:
        vals = np.asarray(pooled[name], dtype=np.float64)
        if vals.size < 2:
            raise ValueError(f"need at least 2 observations to standardize {name}, got {vals.size}")
        std = float(vals.std(ddof=0))
        if std == 0.0:
            raise ValueError(f"zero variance in {name}; cannot standardize")
        stats[name] = (float(vals.mean()), std)
    return stats


# --------------------------------------------------------------------------- query / memory


def query_columns(config: FeatureConfig) -> list[str]:
    return (
        [f"part_{p}" for p in range(1, N_PARTS + 1)]
        + [f"tag_{t}" for t in range(config.n_tags)]
        + ["time_delta_std", "log_timestamp_std"]
        + [f"correct_answer_{a}" for a in range(N_ANSWERS)]
        + ["container_delta_scaled", "content_type_delta", "position_norm"]
    )


def memory_columns() -> list[str]:
    return (
        ["explanation_false", "explanation_true", "explanation_absent"]
        + ["incorrect", "correct", "correctness_absent"]
        + ["elapsed_std"]
        + [f"user_answer_{a}" for a in range(N_ANSWERS)]
        + ["user_answer_absent"]
    )


@dataclass
class QueryFeatures:
    content_index: np.ndarray  # (n,) int64
    dense: np.ndarray  # (n, len(query_columns))


def compute_query_features(
    window: Sequence[InteractionEvent],
    meta: Metadata,
    config: FeatureConfig,
    previous: InteractionEvent | None = None,
    offset: int = 0,
) -> QueryFeatures:
    """Query features for consecutive events of one user.

    ``previous`` is the event just before ``window[0]`` in the full history
    (deltas are 0 without it); ``offset`` is the window slot of ``window[0]``,
    used for the normalized position ``(slot + 1) / seq_len``.
    """
    n = len(window)
    if offset < 0 or offset + n > config.seq_len:
        raise ValueError(f"window of {n} events at offset {offset} exceeds seq_len {config.seq_len}")
    n_tags = config.n_tags
    width = N_PARTS + n_tags + 2 + N_ANSWERS + 3
    dense = np.zeros((n, width), dtype=np.float64)
    content = np.empty(n, dtype=np.int64)
    c_time = N_PARTS + n_tags
    c_ans = c_time + 2
    c_tail = c_ans + N_ANSWERS
    prev = previous
    for k, e in enumerate(window):
        content[k] = meta.content_index(e)
        row = dense[k]
        if not e.is_lecture:
            q = meta.question(e)
            row[q.part - 1] = 1.0
            for t in q.tags:
                row[N_PARTS + t] = 1.0
            row[c_ans + q.correct_answer] = 1.0
        if prev is not None:
            time_delta = float(e.timestamp_ms - prev.timestamp_ms)
            row[c_tail] = (e.task_container_id - prev.task_container_id) / config.container_delta_divisor
            row[c_tail + 1] = float(int(e.content_type) - int(prev.content_type))
        else:
            time_delta = 0.0
        row[c_time] = config.standardize("time_delta", time_delta)
        row[c_time + 1] = config.standardize("log_timestamp", math.log1p(e.timestamp_ms))
        row[c_tail + 2] = (offset + k + 1) / config.seq_len
        prev = e
    return QueryFeatures(content, dense)


def compute_memory_features(window: Sequence[InteractionEvent], config: FeatureConfig) -> np.ndarray:
    out = np.zeros((len(window), MEMORY_WIDTH), dtype=np.float64)
    for k, e in enumerate(window):
        row = out[k]
        row[2 if e.had_explanation is None else int(e.had_explanation)] = 1.0
        row[5 if e.answered_correctly is None else 3 + int(e.answered_correctly)] = 1.0
        if e.elapsed_time_ms is not None:
            row[6] = config.standardize("elapsed_time", float(e.elapsed_time_ms))
        row[11 if e.user_answer is None else 7 + e.user_answer] = 1.0
    return out


# --------------------------------------------------------------------------- hand-crafted


@dataclass
class UserAggregateState:
    """Committed per-user counters plus the buffered, not yet visible, open container."""

    n_tags: int
    answered_total: int = 0
    answered_correct: int = 0
    content_attempts: dict[int, int] = field(default_factory=dict)
    content_correct: dict[int, int] = field(default_factory=dict)
    part_attempts: np.ndarray = None
    part_correct: np.ndarray = None
    tag_attempts: np.ndarray = None
    tag_correct: np.ndarray = None
    lecture_part: np.ndarray = None
    lecture_tag: np.ndarray = None
    lecture_type: np.ndarray = None
    explanation_after_correct: int = 0
    explanation_after_incorrect: int = 0
    explanation_total: int = 0
    explanation_known_correct: int = 0
    explanation_known_incorrect: int = 0
    elapsed_sum_ms: int = 0
    elapsed_count: int = 0
    answer_counts: np.ndarray = None
    pending: list[InteractionEvent] = field(default_factory=list)

    def __post_init__(self) -> None:
        zeros = lambda n: np.zeros(n, dtype=np.int64)  # noqa: E731
        for name, n in (
            ("part_attempts", N_PARTS),
            ("part_correct", N_PARTS),
            ("tag_attempts", self.n_tags),
            ("tag_correct", self.n_tags),
            ("lecture_part", N_PARTS),
            ("lecture_tag", self.n_tags),
            ("lecture_type", N_LECTURE_TYPES),
            ("answer_counts", N_ANSWERS),
        ):
            if getattr(self, name) is None:
                setattr(self, name, zeros(n))

    def buffer(self, event: InteractionEvent) -> None:
        self.pending.append(event)


def commit_container(state: UserAggregateState, meta: Metadata) -> UserAggregateState:
    """Fold the pending container into the committed counters (in place) and empty the buffer."""
    if not state.pending:
        return state
    ids = {e.task_container_id for e in state.pending}
    if len(ids) > 1:
        raise ValueError(f"pending buffer mixes containers {sorted(ids)}")
    for e in state.pending:
        if e.is_lecture:
            lec = meta.lecture(e)
            state.lecture_part[lec.part - 1] += 1
            state.lecture_tag[lec.tag] += 1
            state.lecture_type[lec.type_of.index] += 1
            continue
        q = meta.question(e)
        correct = int(bool(e.answered_correctly))
        state.answered_total += 1
        state.answered_correct += correct
        state.content_attempts[e.content_id] = state.content_attempts.get(e.content_id, 0) + 1
        state.content_correct[e.content_id] = state.content_correct.get(e.content_id, 0) + correct
        state.part_attempts[q.part - 1] += 1
        state.part_correct[q.part - 1] += correct
        for t in q.tags:
            state.tag_attempts[t] += 1
            state.tag_correct[t] += correct
        if e.had_explanation is not None:
            seen = int(e.had_explanation)
            state.explanation_total += seen
            if correct:
                state.explanation_known_correct += 1
                state.explanation_after_correct += seen
            else:
                state.explanation_known_incorrect += 1
                state.explanation_after_incorrect += seen
        if e.elapsed_time_ms is not None:
            state.elapsed_sum_ms += e.elapsed_time_ms
            state.elapsed_count += 1
        state.answer_counts[e.user_answer] += 1
    state.pending.clear()
    return state


def handcrafted_layout(config: FeatureConfig) -> list[tuple[str, str]]:
    """``(name, kind)`` per hand-crafted column; kind is ``ratio``, ``count`` or ``value``."""
    cols: list[tuple[str, str]] = [
        ("correct_ratio", "ratio"),
        ("answered_count", "count"),
        ("content_correct_ratio", "ratio"),
        ("content_attempt_count", "count"),
    ]
    cols += [(f"part{p}_correct_ratio", "ratio") for p in range(1, N_PARTS + 1)]
    cols += [(f"part{p}_attempt_count", "count") for p in range(1, N_PARTS + 1)]
    if config.tag_mode == "current":
        slots = range(config.max_question_tags)
        cols += [(f"cur_tag{s}_correct_ratio", "ratio") for s in slots]
        cols += [(f"cur_tag{s}_attempt_count", "count") for s in slots]
    else:
        cols += [(f"tag{t}_correct_ratio", "ratio") for t in range(config.n_tags)]
        cols += [(f"tag{t}_attempt_count", "count") for t in range(config.n_tags)]
    cols += [(f"lecture_part{p}_count", "count") for p in range(1, N_PARTS + 1)]
    cols += [(f"lecture_type_{lt.name.lower()}_count", "count") for lt in LectureType]
    if config.tag_mode == "current":
        cols += [(f"lecture_cur_tag{s}_count", "count") for s in range(config.max_question_tags)]
    else:
        cols += [(f"lecture_tag{t}_count", "count") for t in range(config.n_tags)]
    cols += [
        ("explanation_after_correct_ratio", "ratio"),
        ("explanation_after_incorrect_ratio", "ratio"),
        ("explanation_seen_count", "count"),
        ("mean_elapsed_std", "value"),
    ]
    cols += [(f"user_answer{a}_ratio", "ratio") for a in range(N_ANSWERS)]
    natural = len(cols)
    if config.target_width is not None:
        if config.target_width < natural:
            raise ValueError(f"target_width {config.target_width} is below the layout width {natural}")
        cols += [(f"pad{k}", "value") for k in range(config.target_width - natural)]
    return cols


def _ratios(num, den, default: float) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.full(num.shape, default), where=den > 0)


def _current_tags(event: InteractionEvent, meta: Metadata, limit: int) -> list[int]:
    if event.is_lecture:
        return [meta.lecture(event).tag]
    return sorted(meta.question(event).tags)[:limit]


def snapshot_handcrafted(
    state: UserAggregateState, event: InteractionEvent, meta: Metadata, config: FeatureConfig
) -> np.ndarray:
    """Hand-crafted vector for ``event`` from committed counters only (see :func:`handcrafted_layout`)."""
    d = config.ratio_default
    count = np.log1p if config.count_transform == "log1p" else (lambda x: np.asarray(x, dtype=np.float64))
    parts: list[np.ndarray] = []

    parts.append(np.array([_ratios(state.answered_correct, state.answered_total, d), count(state.answered_total)]))
    if event.is_lecture:
        parts.append(np.array([d, 0.0]))
    else:
        att = state.content_attempts.get(event.content_id, 0)
        cor = state.content_correct.get(event.content_id, 0)
        parts.append(np.array([_ratios(cor, att, d), count(att)]))
    parts.append(_ratios(state.part_correct, state.part_attempts, d))
    parts.append(count(state.part_attempts))

    if config.tag_mode == "current":
        T = config.max_question_tags
        tags = _current_tags(event, meta, T)
        t_ratio = np.full(T, d)
        t_count = np.zeros(T)
        lec_tag = np.zeros(T)
        if tags:
            idx = np.asarray(tags)
            t_ratio[: idx.size] = _ratios(state.tag_correct[idx], state.tag_attempts[idx], d)
            t_count[: idx.size] = count(state.tag_attempts[idx])
            lec_tag[: idx.size] = count(state.lecture_tag[idx])
        parts += [t_ratio, t_count]
    else:
        parts.append(_ratios(state.tag_correct, state.tag_attempts, d))
        parts.append(count(state.tag_attempts))
        lec_tag = count(state.lecture_tag)

    parts.append(count(state.lecture_part))
    parts.append(count(state.lecture_type))
    parts.append(np.asarray(lec_tag, dtype=np.float64))

    if state.elapsed_count:
        mean_elapsed = config.standardize("elapsed_time", state.elapsed_sum_ms / state.elapsed_count)
    else:
        mean_elapsed = 0.0
    parts.append(
        np.array(
            [
                _ratios(state.explanation_after_correct, state.explanation_known_correct, d),
                _ratios(state.explanation_after_incorrect, state.explanation_known_incorrect, d),
                count(state.explanation_total),
                mean_elapsed,
            ]
        )
    )
    parts.append(_ratios(state.answer_counts, state.answered_total, d))
    vec = np.concatenate([np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in parts])
    if config.target_width is not None and vec.size < config.target_width:
        vec = np.concatenate([vec, np.zeros(config.target_width - vec.size)])
    return vec


def stream_user(history: UserHistory, meta: Metadata, config: FeatureConfig) -> np.ndarray:
    """Hand-crafted matrix (n_events, F), committing each container when the next run begins."""
    width = len(handcrafted_layout(config))
    out = np.zeros((len(history.events), width), dtype=np.float64)
    state = UserAggregateState(config.n_tags)
    prev_id = None
    for pos, e in enumerate(history.events):
        if pos > 0 and e.task_container_id != prev_id:
            commit_container(state, meta)
        out[pos] = snapshot_handcrafted(state, e, meta, config)
        state.buffer(e)
        prev_id = e.task_container_id
    return out


# --------------------------------------------------------------------------- bundling


@dataclass
class FeatureTensors:
    """Aligned per-event features for one user's full history.

    The ``position_norm`` query column depends on window placement and is
    rewritten by :meth:`window`.
    """

    user_id: int
    row_ids: np.ndarray
    containers: np.ndarray
    content_index: np.ndarray
    query: np.ndarray
    memory: np.ndarray
    handcrafted: np.ndarray
    labels: np.ndarray  # 0/1, 0 for lectures
    is_question: np.ndarray  # bool

    def __len__(self) -> int:
        return int(self.row_ids.size)

    def window(self, start: int, end: int, seq_len: int) -> "FeatureTensors":
        """Slice ``[start, end)`` with position_norm recomputed for left padding up to ``seq_len``."""
        n = end - start
        pad = seq_len - n
        query = self.query[start:end].copy()
        query[:, -1] = (pad + np.arange(n) + 1) / seq_len
        return FeatureTensors(
            self.user_id,
            self.row_ids[start:end],
            self.containers[start:end],
            self.content_index[start:end],
            query,
            self.memory[start:end],
            self.handcrafted[start:end],
            self.labels[start:end],
            self.is_question[start:end],
        )


def user_features(history: UserHistory, meta: Metadata, config: FeatureConfig) -> FeatureTensors:
    events = history.events
    n = len(events)
    # position column is a placeholder until windowed
    q_width = len(query_columns(config))
    query = np.zeros((n, q_width))
    content = np.zeros(n, dtype=np.int64)
    chunk = config.seq_len
    for start in range(0, n, chunk):
        qf = compute_query_features(
            events[start : start + chunk], meta, config, previous=events[start - 1] if start else None
        )
        query[start : start + chunk] = qf.dense
        content[start : start + chunk] = qf.content_index
    return FeatureTensors(
        user_id=history.user_id,
        row_ids=np.array([e.row_id for e in events], dtype=np.int64),
        containers=np.array([e.task_container_id for e in events], dtype=np.int64),
        content_index=content,
        query=query,
        memory=compute_memory_features(events, config),
        handcrafted=stream_user(history, meta, config),
        labels=np.array([0.0 if e.is_lecture else float(e.answered_correctly) for e in events]),
        is_question=np.array([not e.is_lecture for e in events], dtype=bool),
    )
