"""Seeded IRT-style student simulator producing canonical histories.

Each user has an ability ``theta``; each question a difficulty ``b``,
discrimination ``a``, part and tags.  Practice in a part raises the chance of
success there::

    P(correct) = sigmoid(a * (theta + gamma[part] * log(1 + prior attempts in part) - b))

Questions are served in containers of 1-5 questions from one part, with
occasional single-lecture containers in between.  Every user draws from its
own seed stream ``(seed, user_id)``, so users can be generated in any order
or in parallel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO

import numpy as np

from .events import (
    ContentType,
    InteractionEvent,
    LectureMeta,
    LectureType,
    Metadata,
    QuestionMeta,
    UserHistory,
    validate_history,
    write_events,
    write_lectures,
    write_questions,
)

__all__ = ["SynthConfig", "SynthData", "generate", "correct_probability", "write_synth", "truth_auc"]


@dataclass
class SynthConfig:
    n_users: int = 100
    n_questions: int = 200
    n_lectures: int = 20
    n_tags: int = 24
    events_per_user: tuple[int, int] = (50, 150)
    container_size_weights: tuple[float, ...] = (0.55, 0.2, 0.12, 0.08, 0.05)
    lecture_prob: float = 0.05
    ability_sd: float = 1.0
    difficulty_sd: float = 1.0
    discrimination_log_sd: float = 0.25
    learning_rate: tuple[float, ...] = (0.15,) * 7
    elapsed_log_mean: float = math.log(20_000.0)
    elapsed_log_sd: float = 0.5
    gap_log_mean: float = math.log(60_000.0)
    gap_log_sd: float = 1.0
    explanation_prob: float = 0.6
    max_tags_per_question: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        self.events_per_user = tuple(self.events_per_user)
        self.container_size_weights = tuple(float(w) for w in self.container_size_weights)
        lr = self.learning_rate
        self.learning_rate = (float(lr),) * 7 if np.isscalar(lr) else tuple(float(g) for g in lr)
        self.validate()

    def validate(self) -> None:
        if self.n_users < 1 or self.n_questions < 1 or self.n_tags < 1 or self.n_lectures < 0:
            raise ValueError("n_users, n_questions, n_tags must be >= 1 and n_lectures >= 0")
        lo, hi = self.events_per_user
        if not 1 <= lo <= hi:
            raise ValueError(f"events_per_user must satisfy 1 <= lo <= hi, got {self.events_per_user}")
        w = self.container_size_weights
        if not 1 <= len(w) <= 5 or any(x < 0 for x in w) or sum(w) <= 0:
            raise ValueError("container_size_weights must be 1-5 non-negative weights with a positive sum")
        for name in ("lecture_prob", "explanation_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.lecture_prob > 0 and self.n_lectures == 0:
            raise ValueError("lecture_prob > 0 requires n_lectures >= 1")
        if len(self.learning_rate) != 7 or any(g < 0 for g in self.learning_rate):
            raise ValueError("learning_rate needs 7 non-negative per-part values")
        for name in ("ability_sd", "difficulty_sd", "discrimination_log_sd", "elapsed_log_sd", "gap_log_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 1 <= self.max_tags_per_question <= self.n_tags:
            raise ValueError("max_tags_per_question must be in [1, n_tags]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["events_per_user"] = list(self.events_per_user)
        d["container_size_weights"] = list(self.container_size_weights)
        d["learning_rate"] = list(self.learning_rate)
        return d


@dataclass
class SynthData:
    histories: dict[int, UserHistory]
    meta: Metadata
    truth: dict[int, float]  # row_id -> P(correct), questions only
    abilities: dict[int, float] = field(default_factory=dict)
    difficulty: dict[int, float] = field(default_factory=dict)
    discrimination: dict[int, float] = field(default_factory=dict)


def correct_probability(theta: float, difficulty: float, discrimination: float, gamma: float, attempts: int) -> float:
    z = discrimination * (theta + gamma * math.log1p(attempts) - difficulty)
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def _build_meta(config: SynthConfig, rng: np.random.Generator):
    questions = {}
    b = rng.normal(0.0, config.difficulty_sd, size=config.n_questions) if config.difficulty_sd else np.zeros(config.n_questions)
    a = rng.lognormal(0.0, config.discrimination_log_sd, size=config.n_questions)
    for qid in range(config.n_questions):
        n_tags = int(rng.integers(1, config.max_tags_per_question + 1))
        tags = frozenset(int(t) for t in rng.choice(config.n_tags, size=n_tags, replace=False))
        questions[qid] = QuestionMeta(qid, int(rng.integers(0, 4)), int(rng.integers(1, 8)), tags)
    types = list(LectureType)
    lectures = {}
    for k in range(config.n_lectures):
        lid = config.n_questions + k
        lectures[lid] = LectureMeta(lid, int(rng.integers(0, config.n_tags)), int(rng.integers(1, 8)), types[int(rng.integers(0, len(types)))])
    meta = Metadata(questions, lectures, config.n_tags)
    return meta, {q: float(b[q]) for q in questions}, {q: float(a[q]) for q in questions}


def _generate_user(uid: int, config: SynthConfig, meta: Metadata, b: dict, a: dict, by_part: dict):
    rng = np.random.default_rng([config.seed, 1, uid])
    theta = float(rng.normal(0.0, config.ability_sd)) if config.ability_sd else 0.0
    lo, hi = config.events_per_user
    n_events = int(rng.integers(lo, hi + 1))
    sizes = np.arange(1, len(config.container_size_weights) + 1)
    weights = np.asarray(config.container_size_weights) / sum(config.container_size_weights)
    lecture_ids = sorted(meta.lectures)
    parts_available = sorted(p for p, qs in by_part.items() if qs)
    attempts = [0] * 8

    rows = []  # (timestamp, content_id, ctype, container, answer, correct, elapsed, expl, p)
    ts = 0
    container = 0
    while len(rows) < n_events:
        if rows:
            ts += max(1, int(rng.lognormal(config.gap_log_mean, config.gap_log_sd)))
        if lecture_ids and rng.random() < config.lecture_prob:
            lid = lecture_ids[int(rng.integers(0, len(lecture_ids)))]
            rows.append((ts, lid, ContentType.LECTURE, container, None, None, None, None, None))
            container += 1
            continue
        part = parts_available[int(rng.integers(0, len(parts_available)))]
        pool = by_part[part]
        k = int(rng.choice(sizes, p=weights))
        k = min(k, len(pool), n_events - len(rows))
        picked = rng.choice(len(pool), size=k, replace=False)
        elapsed = int(rng.lognormal(config.elapsed_log_mean, config.elapsed_log_sd))
        explained = bool(rng.random() < config.explanation_prob)
        gamma = config.learning_rate[part - 1]
        for j in picked:
            qid = pool[int(j)]
            q = meta.questions[qid]
            p = correct_probability(theta, b[qid], a[qid], gamma, attempts[part])
            correct = bool(rng.random() < p)
            if correct:
                answer = q.correct_answer
            else:
                others = [c for c in range(4) if c != q.correct_answer]
                answer = others[int(rng.integers(0, 3))]
            rows.append((ts, qid, ContentType.QUESTION, container, answer, correct, elapsed, explained, p))
            attempts[part] += 1
        container += 1
    return theta, rows


def generate(config: SynthConfig) -> SynthData:
    """Histories, metadata and true correctness probabilities for ``config``."""
    config.validate()
    meta, b, a = _build_meta(config, np.random.default_rng([config.seed, 0]))
    by_part: dict[int, list[int]] = {p: [] for p in range(1, 8)}
    for qid in sorted(meta.questions):
        by_part[meta.questions[qid].part].append(qid)

    histories: dict[int, UserHistory] = {}
    truth: dict[int, float] = {}
    abilities: dict[int, float] = {}
    row_id = 0
    for uid in range(config.n_users):
        theta, rows = _generate_user(uid, config, meta, b, a, by_part)
        abilities[uid] = theta
        events = []
        for ts, cid, ctype, container, answer, correct, elapsed, expl, p in rows:
            events.append(
                InteractionEvent(
                    row_id=row_id,
                    user_id=uid,
                    timestamp_ms=ts,
                    content_id=cid,
                    content_type=ctype,
                    task_container_id=container,
                    user_answer=answer,
                    answered_correctly=correct,
                    elapsed_time_ms=elapsed,
                    had_explanation=expl,
                )
            )
            if p is not None:
                truth[row_id] = p
            row_id += 1
        hist = UserHistory(uid, events)
        problems = validate_history(hist)
        if problems:
            raise AssertionError(f"generator produced invalid history for user {uid}: {problems[0]}")
        histories[uid] = hist
    return SynthData(histories, meta, truth, abilities, b, a)


def write_truth(truth: dict[int, float], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(("row_id", "p_correct"))
    for rid in sorted(truth):
        writer.writerow((rid, repr(truth[rid])))


def write_synth(data: SynthData, out_dir: str | Path) -> dict[str, Path]:
    """Write events/questions/lectures/truth CSVs; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "events": out / "events.csv",
        "questions": out / "questions.csv",
        "lectures": out / "lectures.csv",
        "truth": out / "truth.csv",
    }
    with open(paths["events"], "w", newline="") as fh:
        write_events(data.histories, fh)
    with open(paths["questions"], "w", newline="") as fh:
        write_questions(data.meta.questions, fh)
    with open(paths["lectures"], "w", newline="") as fh:
        write_lectures(data.meta.lectures, fh)
    with open(paths["truth"], "w", newline="") as fh:
        write_truth(data.truth, fh)
    return paths


def truth_auc(data: SynthData, users=None) -> float:
    """AUC of scoring each question event by its true probability: the dataset's ceiling."""
    from .metrics import roc_auc

    users = data.histories.keys() if users is None else users
    labels, scores = [], []
    for uid in users:
        for e in data.histories[uid].events:
            if not e.is_lecture:
                labels.append(int(e.answered_correctly))
                scores.append(data.truth[e.row_id])
    return roc_auc(labels, scores)
