"""Interaction events, question/lecture metadata and CSV ingestion.

Two event CSV layouts are understood:

* ``Canonical``: the package's own format, where elapsed time and explanation
  describe the question on the same row.  Absent values are written as -1.
* ``CompetitionPrior``: the competition train.csv layout, where
  ``prior_question_elapsed_time`` / ``prior_question_had_explanation`` describe
  the *previous* question container.  :func:`adapt_prior_fields` shifts them
  back onto the container they belong to.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator, Mapping

__all__ = [
    "ContentType",
    "LectureType",
    "Schema",
    "InteractionEvent",
    "QuestionMeta",
    "LectureMeta",
    "Metadata",
    "UserHistory",
    "Violation",
    "ParseError",
    "CANONICAL_COLUMNS",
    "COMPETITION_COLUMNS",
    "parse_events",
    "write_events",
    "adapt_prior_fields",
    "validate_history",
    "container_runs",
    "parse_questions",
    "parse_lectures",
    "write_questions",
    "write_lectures",
]


class ContentType(enum.IntEnum):
    QUESTION = 0
    LECTURE = 1


class LectureType(enum.Enum):
    CONCEPT = "concept"
    SOLVING_QUESTION = "solving question"
    INTENTION = "intention"
    STARTER = "starter"

    @classmethod
    def parse(cls, text: str) -> "LectureType":
        key = text.strip().lower().replace("_", " ")
        for member in cls:
            if member.value == key or member.name.lower().replace("_", " ") == key:
                return member
        raise ValueError(f"unknown lecture type_of {text!r}")

    @property
    def index(self) -> int:
        return list(LectureType).index(self)


class Schema(enum.Enum):
    CANONICAL = "canonical"
    COMPETITION_PRIOR = "competition_prior"


CANONICAL_COLUMNS = (
    "row_id",
    "user_id",
    "timestamp_ms",
    "content_id",
    "content_type",
    "task_container_id",
    "user_answer",
    "answered_correctly",
    "elapsed_time_ms",
    "had_explanation",
)

COMPETITION_COLUMNS = (
    "row_id",
    "timestamp",
    "user_id",
    "content_id",
    "content_type_id",
    "task_container_id",
    "user_answer",
    "answered_correctly",
    "prior_question_elapsed_time",
    "prior_question_had_explanation",
)


class ParseError(ValueError):
    """Malformed input row; carries the 1-based file line and the column name."""

    def __init__(self, line: int, column: str | None, message: str) -> None:
        where = f"row {line}" + (f", column {column!r}" if column else "")
        super().__init__(f"{where}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True, slots=True)
class InteractionEvent:
    row_id: int
    user_id: int
    timestamp_ms: int
    content_id: int
    content_type: ContentType
    task_container_id: int
    user_answer: int | None = None
    answered_correctly: bool | None = None
    elapsed_time_ms: int | None = None
    had_explanation: bool | None = None

    def __post_init__(self) -> None:
        for name in ("row_id", "user_id", "timestamp_ms", "content_id", "task_container_id"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.is_lecture:
            if any(
                v is not None
                for v in (self.user_answer, self.answered_correctly, self.elapsed_time_ms, self.had_explanation)
            ):
                raise ValueError("lecture events carry no answer, timing or explanation fields")
        else:
            if self.user_answer is None or self.answered_correctly is None:
                raise ValueError("question events require user_answer and answered_correctly")
            if self.user_answer not in (0, 1, 2, 3):
                raise ValueError(f"user_answer {self.user_answer} outside {{0,1,2,3}}")
        if self.elapsed_time_ms is not None and self.elapsed_time_ms < 0:
            raise ValueError("elapsed_time_ms must be >= 0")

    @property
    def is_lecture(self) -> bool:
        return self.content_type == ContentType.LECTURE


@dataclass(frozen=True, slots=True)
class QuestionMeta:
    question_id: int
    correct_answer: int
    part: int
    tags: frozenset[int]

    def __post_init__(self) -> None:
        if self.correct_answer not in (0, 1, 2, 3):
            raise ValueError(f"question {self.question_id}: correct_answer outside {{0,1,2,3}}")
        if not 1 <= self.part <= 7:
            raise ValueError(f"question {self.question_id}: part {self.part} outside 1..7")

    @property
    def has_tags(self) -> bool:
        return bool(self.tags)


@dataclass(frozen=True, slots=True)
class LectureMeta:
    lecture_id: int
    tag: int
    part: int
    type_of: LectureType

    def __post_init__(self) -> None:
        if not 1 <= self.part <= 7:
            raise ValueError(f"lecture {self.lecture_id}: part {self.part} outside 1..7")


@dataclass
class Metadata:
    """Question and lecture tables plus the embedding index layout.

    Questions occupy embedding rows ``[0, n_questions)`` in ascending id order,
    lectures the following ``n_lectures`` rows.
    """

    questions: dict[int, QuestionMeta]
    lectures: dict[int, LectureMeta]
    n_tags: int
    question_index: dict[int, int] = field(init=False, repr=False)
    lecture_index: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.question_index = {qid: i for i, qid in enumerate(sorted(self.questions))}
        nq = len(self.question_index)
        self.lecture_index = {lid: nq + i for i, lid in enumerate(sorted(self.lectures))}
        for q in self.questions.values():
            bad = [t for t in q.tags if not 0 <= t < self.n_tags]
            if bad:
                raise ValueError(f"question {q.question_id}: tags {bad} outside [0, {self.n_tags})")
        for lec in self.lectures.values():
            if not 0 <= lec.tag < self.n_tags:
                raise ValueError(f"lecture {lec.lecture_id}: tag {lec.tag} outside [0, {self.n_tags})")

    @property
    def n_questions(self) -> int:
        return len(self.questions)

    @property
    def n_lectures(self) -> int:
        return len(self.lectures)

    @property
    def n_content(self) -> int:
        return self.n_questions + self.n_lectures

    def content_index(self, event: InteractionEvent) -> int:
        table = self.lecture_index if event.is_lecture else self.question_index
        try:
            return table[event.content_id]
        except KeyError:
            kind = "lecture" if event.is_lecture else "question"
            raise KeyError(f"{kind} content_id {event.content_id} not in metadata") from None

    def question(self, event: InteractionEvent) -> QuestionMeta:
        try:
            return self.questions[event.content_id]
        except KeyError:
            raise KeyError(f"question content_id {event.content_id} not in metadata") from None

    def lecture(self, event: InteractionEvent) -> LectureMeta:
        try:
            return self.lectures[event.content_id]
        except KeyError:
            raise KeyError(f"lecture content_id {event.content_id} not in metadata") from None


@dataclass
class UserHistory:
    """Ordered events of one user.

    ``priors`` is only set for histories read with the competition layout: one
    ``(prior_elapsed_ms, prior_had_explanation)`` pair per event, still in the
    shifted convention.  Canonical histories have ``priors is None``.
    """

    user_id: int
    events: list[InteractionEvent]
    priors: list[tuple[int | None, bool | None]] | None = None

    def __len__(self) -> int:
        return len(self.events)

    @property
    def containers(self) -> list[int]:
        return [e.task_container_id for e in self.events]


@dataclass(frozen=True, slots=True)
class Violation:
    position: int
    message: str


def container_runs(events: Iterable[InteractionEvent]) -> list[int]:
    """Run index of every event; a run is a maximal block of equal adjacent container IDs."""
    runs: list[int] = []
    prev = None
    run = -1
    for e in events:
        if e.task_container_id != prev:
            run += 1
            prev = e.task_container_id
        runs.append(run)
    return runs


# --------------------------------------------------------------------------- parsing


def _text_stream(stream: IO) -> IO[str]:
    if isinstance(stream, io.TextIOBase):
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8", newline="")


def _parse_int(raw: str, line: int, column: str) -> int:
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(line, column, f"cannot parse integer from {raw!r}") from None
    if not value.is_integer():
        raise ParseError(line, column, f"cannot parse integer from {raw!r}")
    return int(value)


def _optional_int(raw: str, line: int, column: str) -> int | None:
    value = _parse_int(raw, line, column)
    if value == -1:
        return None
    if value < 0:
        raise ParseError(line, column, f"value {value} out of range")
    return value


def _optional_flag(raw: str, line: int, column: str) -> bool | None:
    value = _parse_int(raw, line, column)
    if value == -1:
        return None
    if value not in (0, 1):
        raise ParseError(line, column, f"value {value} out of range, expected 0, 1 or -1")
    return bool(value)


def _nonneg(raw: str, line: int, column: str) -> int:
    value = _parse_int(raw, line, column)
    if value < 0:
        raise ParseError(line, column, f"value {value} out of range")
    return value


def _rows(stream: IO, expected: tuple[str, ...]) -> Iterator[tuple[int, list[str]]]:
    reader = csv.reader(_text_stream(stream))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(1, None, "missing header row") from None
    header = [h.strip() for h in header]
    if tuple(header) != expected:
        raise ParseError(1, None, f"header {header} does not match expected columns {list(expected)}")
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(expected):
            raise ParseError(line, None, f"expected {len(expected)} fields, got {len(row)}")
        yield line, row


def _canonical_event(line: int, row: list[str]) -> InteractionEvent:
    cols = dict(zip(CANONICAL_COLUMNS, row))
    ctype_raw = _parse_int(cols["content_type"], line, "content_type")
    if ctype_raw not in (0, 1):
        raise ParseError(line, "content_type", f"value {ctype_raw} out of range, expected 0 or 1")
    user_answer = _optional_int(cols["user_answer"], line, "user_answer")
    if user_answer is not None and user_answer > 3:
        raise ParseError(line, "user_answer", f"value {user_answer} out of range, expected 0..3")
    try:
        return InteractionEvent(
            row_id=_nonneg(cols["row_id"], line, "row_id"),
            user_id=_nonneg(cols["user_id"], line, "user_id"),
            timestamp_ms=_nonneg(cols["timestamp_ms"], line, "timestamp_ms"),
            content_id=_nonneg(cols["content_id"], line, "content_id"),
            content_type=ContentType(ctype_raw),
            task_container_id=_nonneg(cols["task_container_id"], line, "task_container_id"),
            user_answer=user_answer,
            answered_correctly=_optional_flag(cols["answered_correctly"], line, "answered_correctly"),
            elapsed_time_ms=_optional_int(cols["elapsed_time_ms"], line, "elapsed_time_ms"),
            had_explanation=_optional_flag(cols["had_explanation"], line, "had_explanation"),
        )
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(line, None, str(exc)) from None


def _competition_event(line: int, row: list[str]) -> tuple[InteractionEvent, tuple[int | None, bool | None]]:
    cols = dict(zip(COMPETITION_COLUMNS, row))
    ctype_raw = _parse_int(cols["content_type_id"], line, "content_type_id")
    if ctype_raw not in (0, 1):
        raise ParseError(line, "content_type_id", f"value {ctype_raw} out of range, expected 0 or 1")
    is_lecture = ctype_raw == 1
    answer = _parse_int(cols["user_answer"], line, "user_answer")
    correct = _parse_int(cols["answered_correctly"], line, "answered_correctly")
    if not is_lecture:
        if answer not in (0, 1, 2, 3):
            raise ParseError(line, "user_answer", f"value {answer} out of range, expected 0..3")
        if correct not in (0, 1):
            raise ParseError(line, "answered_correctly", f"value {correct} out of range, expected 0 or 1")

    raw_elapsed = cols["prior_question_elapsed_time"].strip()
    prior_elapsed: int | None = None
    if raw_elapsed and raw_elapsed.lower() != "nan":
        try:
            value = float(raw_elapsed)
        except ValueError:
            raise ParseError(line, "prior_question_elapsed_time", f"cannot parse {raw_elapsed!r}") from None
        if not math.isfinite(value) or value < 0:
            raise ParseError(line, "prior_question_elapsed_time", f"value {raw_elapsed} out of range")
        prior_elapsed = int(round(value))
    raw_expl = cols["prior_question_had_explanation"].strip().lower()
    if raw_expl in ("", "nan", "-1"):
        prior_expl = None
    elif raw_expl in ("true", "1"):
        prior_expl = True
    elif raw_expl in ("false", "0"):
        prior_expl = False
    else:
        raise ParseError(line, "prior_question_had_explanation", f"cannot parse {raw_expl!r}")

    try:
        event = InteractionEvent(
            row_id=_nonneg(cols["row_id"], line, "row_id"),
            user_id=_nonneg(cols["user_id"], line, "user_id"),
            timestamp_ms=_nonneg(cols["timestamp"], line, "timestamp"),
            content_id=_nonneg(cols["content_id"], line, "content_id"),
            content_type=ContentType(ctype_raw),
            task_container_id=_nonneg(cols["task_container_id"], line, "task_container_id"),
            user_answer=None if is_lecture else answer,
            answered_correctly=None if is_lecture else bool(correct),
        )
    except ValueError as exc:
        raise ParseError(line, None, str(exc)) from None
    return event, (prior_elapsed, prior_expl)


def parse_events(csv_stream: IO, schema: Schema | str = Schema.CANONICAL) -> dict[int, UserHistory]:
    """Read an event CSV into per-user histories, preserving file order within a user."""
    schema = Schema(schema)
    histories: dict[int, UserHistory] = {}
    seen_rows: dict[int, int] = {}
    if schema is Schema.CANONICAL:
        for line, row in _rows(csv_stream, CANONICAL_COLUMNS):
            event = _canonical_event(line, row)
            if event.row_id in seen_rows:
                raise ParseError(line, "row_id", f"duplicate row_id {event.row_id} (first at row {seen_rows[event.row_id]})")
            seen_rows[event.row_id] = line
            histories.setdefault(event.user_id, UserHistory(event.user_id, [])).events.append(event)
        return histories

    for line, row in _rows(csv_stream, COMPETITION_COLUMNS):
        event, prior = _competition_event(line, row)
        if event.row_id in seen_rows:
            raise ParseError(line, "row_id", f"duplicate row_id {event.row_id} (first at row {seen_rows[event.row_id]})")
        seen_rows[event.row_id] = line
        hist = histories.setdefault(event.user_id, UserHistory(event.user_id, [], priors=[]))
        hist.events.append(event)
        hist.priors.append(prior)
    return {uid: adapt_prior_fields(h) for uid, h in histories.items()}


def _fmt_optional(value: int | bool | None) -> str:
    if value is None:
        return "-1"
    return str(int(value))


def write_events(histories: Mapping[int, UserHistory] | Iterable[UserHistory], stream: IO[str]) -> None:
    """Write histories in the canonical layout, users in mapping order."""
    items = histories.values() if isinstance(histories, Mapping) else histories
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CANONICAL_COLUMNS)
    for hist in items:
        for e in hist.events:
            writer.writerow(
                (
                    e.row_id,
                    e.user_id,
                    e.timestamp_ms,
                    e.content_id,
                    int(e.content_type),
                    e.task_container_id,
                    _fmt_optional(e.user_answer),
                    _fmt_optional(e.answered_correctly),
                    _fmt_optional(e.elapsed_time_ms),
                    _fmt_optional(e.had_explanation),
                )
            )


# --------------------------------------------------------------------------- adapter / validation


def adapt_prior_fields(history: UserHistory) -> UserHistory:
    """Move competition-style ``prior_question_*`` values back onto their own container.

    The value carried by the first event of the next container run that holds a
    question is assigned to every question of the current run.  Question runs with
    no later question run get absent values.  Canonical input (``priors is None``)
    is returned unchanged.
    """
    if history.priors is None:
        return history
    if len(history.priors) != len(history.events):
        raise ValueError("priors must align with events")

    events = history.events
    runs = container_runs(events)
    n_runs = runs[-1] + 1 if runs else 0
    first_pos = [0] * n_runs
    has_question = [False] * n_runs
    for pos in range(len(events) - 1, -1, -1):
        first_pos[runs[pos]] = pos
    for pos, e in enumerate(events):
        if not e.is_lecture:
            has_question[runs[pos]] = True

    carried: list[tuple[int | None, bool | None]] = [(None, None)] * n_runs
    following: tuple[int | None, bool | None] = (None, None)
    for r in range(n_runs - 1, -1, -1):
        carried[r] = following
        if has_question[r]:
            following = history.priors[first_pos[r]]

    adapted = []
    for pos, e in enumerate(events):
        if e.is_lecture:
            adapted.append(e)
            continue
        elapsed, expl = carried[runs[pos]]
        adapted.append(replace(e, elapsed_time_ms=elapsed, had_explanation=expl))
    return UserHistory(history.user_id, adapted)


def validate_history(history: UserHistory) -> list[Violation]:
    """Every broken history invariant, with the position where it shows up."""
    violations: list[Violation] = []
    events = history.events
    closed: set[int] = set()
    run_ts: int | None = None
    for pos, e in enumerate(events):
        if e.user_id != history.user_id:
            violations.append(Violation(pos, f"event user_id {e.user_id} differs from history user {history.user_id}"))
        if pos == 0:
            run_ts = e.timestamp_ms
            continue
        prev = events[pos - 1]
        if e.timestamp_ms < prev.timestamp_ms:
            violations.append(
                Violation(pos, f"timestamp decreases from {prev.timestamp_ms} to {e.timestamp_ms}")
            )
        if e.task_container_id == prev.task_container_id:
            if e.timestamp_ms != run_ts:
                violations.append(
                    Violation(pos, f"container {e.task_container_id} has mixed timestamps {run_ts} and {e.timestamp_ms}")
                )
        else:
            closed.add(prev.task_container_id)
            if e.task_container_id in closed:
                violations.append(Violation(pos, f"container {e.task_container_id} not contiguous"))
            run_ts = e.timestamp_ms
    return violations


# --------------------------------------------------------------------------- metadata


def _meta_rows(stream: IO, required: tuple[str, ...]) -> Iterator[tuple[int, dict[str, str]]]:
    reader = csv.DictReader(_text_stream(stream))
    if reader.fieldnames is None:
        raise ParseError(1, None, "missing header row")
    missing = [c for c in required if c not in reader.fieldnames]
    if missing:
        raise ParseError(1, None, f"missing columns {missing}")
    for line, row in enumerate(reader, start=2):
        if None in row or any(row[c] is None for c in required):
            raise ParseError(line, None, "wrong number of fields")
        yield line, row


def parse_questions(stream: IO) -> dict[int, QuestionMeta]:
    """Read ``question_id, correct_answer, part, tags``; extra columns are ignored."""
    out: dict[int, QuestionMeta] = {}
    for line, row in _meta_rows(stream, ("question_id", "correct_answer", "part", "tags")):
        qid = _nonneg(row["question_id"], line, "question_id")
        raw_tags = row["tags"].strip()
        tags = frozenset(_nonneg(t, line, "tags") for t in raw_tags.split()) if raw_tags else frozenset()
        try:
            out[qid] = QuestionMeta(
                qid,
                _parse_int(row["correct_answer"], line, "correct_answer"),
                _parse_int(row["part"], line, "part"),
                tags,
            )
        except ValueError as exc:
            raise ParseError(line, None, str(exc)) from None
    return out


def parse_lectures(stream: IO) -> dict[int, LectureMeta]:
    out: dict[int, LectureMeta] = {}
    for line, row in _meta_rows(stream, ("lecture_id", "tag", "part", "type_of")):
        lid = _nonneg(row["lecture_id"], line, "lecture_id")
        try:
            out[lid] = LectureMeta(
                lid,
                _nonneg(row["tag"], line, "tag"),
                _parse_int(row["part"], line, "part"),
                LectureType.parse(row["type_of"]),
            )
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(line, None, str(exc)) from None
    return out


def write_questions(questions: Mapping[int, QuestionMeta], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(("question_id", "correct_answer", "part", "tags"))
    for qid in sorted(questions):
        q = questions[qid]
        writer.writerow((qid, q.correct_answer, q.part, " ".join(str(t) for t in sorted(q.tags))))


def write_lectures(lectures: Mapping[int, LectureMeta], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(("lecture_id", "tag", "part", "type_of"))
    for lid in sorted(lectures):
        lec = lectures[lid]
        writer.writerow((lid, lec.tag, lec.part, lec.type_of.value))
