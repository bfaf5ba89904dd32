"""Windowing, batching, Adam and the two-phase training schedule."""

from __future__ import annotations

import bisect
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .events import Metadata, UserHistory
from .features import (
    MEMORY_WIDTH,
    FeatureConfig,
    FeatureTensors,
    fit_standardization,
    handcrafted_layout,
    query_columns,
    user_features,
)
from .metrics import roc_auc
from .model import Batch, ModelConfig, init_params, loss, predict, save_checkpoint
from .plan import build_plan, container_starts

__all__ = [
    "Window",
    "TrainConfig",
    "AdamState",
    "PreparedUser",
    "TrainResult",
    "TrainingDivergedError",
    "make_windows",
    "build_batch",
    "adam_step",
    "split_users",
    "prepare_users",
    "model_config_for",
    "evaluate",
    "train",
    "question_mean_baseline",
    "micro_problem",
]

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- windows


@dataclass(frozen=True)
class Window:
    start: int
    end: int
    truncated: bool = False  # a container run longer than the window was cut

    def __len__(self) -> int:
        return self.end - self.start


def make_windows(history: UserHistory | Sequence[int], seq_len: int, stride: int) -> list[Window]:
    """Cover a history with windows of at most ``seq_len`` events.

    Short histories get one window.  Longer ones get windows every ``stride``
    events, each starting at a container-run start and ending at a run
    boundary; the last window ends at the final event and starts at the first
    run start that keeps it within ``seq_len``.  A run longer than
    ``seq_len`` is cut and its windows are flagged ``truncated``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    containers = history.containers if isinstance(history, UserHistory) else list(history)
    n = len(containers)
    if n == 0:
        return []
    starts = container_starts(containers)
    run_starts = sorted(set(starts.tolist()))
    boundaries = run_starts + [n]
    run_end = np.empty(n, dtype=np.int64)
    for k, s in enumerate(run_starts):
        run_end[s : boundaries[k + 1]] = boundaries[k + 1]

    windows: list[Window] = []
    c = 0
    while True:
        if c + seq_len >= n:
            lo = max(0, n - seq_len)
            k = bisect.bisect_left(run_starts, lo)
            if k < len(run_starts):
                windows.append(Window(run_starts[k], n))
            else:
                windows.append(Window(lo, n, truncated=True))
            return windows
        s = int(starts[c])
        truncated = False
        if run_end[c] - s > seq_len:
            s, truncated = c, True
        e = boundaries[bisect.bisect_right(boundaries, s + seq_len) - 1]
        if e <= s:
            e, truncated = s + seq_len, True
        windows.append(Window(s, e, truncated))
        c = min(c + stride, e)


def latest_window_owner(windows: Sequence[Window], n: int) -> np.ndarray:
    """For each position, the index of the last window (greatest start) containing it."""
    owner = np.full(n, -1, dtype=np.int64)
    for k, w in enumerate(windows):
        owner[w.start : w.end] = k
    return owner


# --------------------------------------------------------------------------- batches


def build_batch(
    pieces: Sequence[FeatureTensors],
    seq_len: int,
    mask_window: int | None = None,
    offsets: Sequence[int] | None = None,
) -> Batch:
    """Left-pad windowed features to ``seq_len`` and attach each window's container plan."""
    B = len(pieces)
    L = seq_len
    qd = pieces[0].query.shape[1]
    fd = pieces[0].handcrafted.shape[1]
    content = np.zeros((B, L), dtype=np.int64)
    query = np.zeros((B, L, qd))
    memory = np.zeros((B, L, MEMORY_WIDTH))
    hand = np.zeros((B, L, fd))
    shift = np.full((B, L), -1, dtype=np.int64)
    allowed = np.zeros((B, L, L), dtype=bool)
    pad_mask = np.zeros((B, L), dtype=bool)
    labels = np.zeros((B, L))
    is_q = np.zeros((B, L), dtype=bool)
    row_ids = np.full((B, L), -1, dtype=np.int64)
    window = L if mask_window is None else mask_window
    for b, ft in enumerate(pieces):
        n = len(ft)
        if n > L:
            raise ValueError(f"window of {n} events exceeds seq_len {L}")
        p = L - n
        plan = build_plan(ft.containers, window)
        content[b, p:] = ft.content_index
        query[b, p:] = ft.query
        memory[b, p:] = ft.memory
        hand[b, p:] = ft.handcrafted
        shift[b, p:] = np.where(plan.shift_index >= 0, plan.shift_index + p, -1)
        allowed[b, p:, p:] = plan.allowed
        pad_mask[b, p:] = True
        labels[b, p:] = ft.labels
        is_q[b, p:] = ft.is_question
        row_ids[b, p:] = ft.row_ids
    return Batch(
        content_index=content,
        query=query,
        memory=memory,
        handcrafted=hand,
        shift_index=shift,
        allowed=allowed,
        pad_mask=pad_mask,
        labels=labels,
        is_question=is_q,
        user_ids=np.array([ft.user_id for ft in pieces], dtype=np.int64),
        row_ids=row_ids,
        offsets=None if offsets is None else np.asarray(offsets, dtype=np.int64),
    )


# --------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int | None = None,
) -> AdamState:
    """Bias-corrected Adam update of ``params`` in place; ``t`` defaults to ``state.t + 1``."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("adam step counter t must be >= 1")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for tensor {name!r}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t
    return state


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs_phase1: int = 5
    lr1: float = 2e-3
    epochs_phase2: int = 1
    lr2: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.2
    stride: int | None = None  # default seq_len // 2
    grad_clip: float | None = None
    log_wall_time: bool = False

    def __post_init__(self) -> None:
        if self.lr1 <= 0 or self.lr2 <= 0:
            raise ValueError("learning rates must be > 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.batch_size < 1 or self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ValueError("batch_size must be >= 1 and epoch counts >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class PreparedUser:
    features: FeatureTensors
    windows: list[Window]


@dataclass
class TrainResult:
    metrics: list[dict]
    params: dict[str, ad.Tensor]  # best validation AUC
    model_config: ModelConfig
    feature_config: FeatureConfig
    train_users: list[int]
    val_users: list[int]
    best_epoch: int
    final_params: dict[str, ad.Tensor] | None = None

    def metrics_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.metrics)


def split_users(user_ids: Iterable[int], val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    users = sorted(user_ids)
    if len(users) < 2:
        raise ValueError("need at least two users to split")
    perm = np.random.default_rng([seed, 101]).permutation(len(users))
    n_val = min(len(users) - 1, max(1, int(round(len(users) * val_fraction))))
    val = sorted(users[k] for k in perm[:n_val])
    train = sorted(users[k] for k in perm[n_val:])
    return train, val


def prepare_users(
    histories: Mapping[int, UserHistory],
    users: Iterable[int],
    meta: Metadata,
    feature_config: FeatureConfig,
    stride: int,
) -> dict[int, PreparedUser]:
    out = {}
    for uid in users:
        h = histories[uid]
        if not h.events:
            continue
        out[uid] = PreparedUser(user_features(h, meta, feature_config), make_windows(h, feature_config.seq_len, stride))
    return out


def model_config_for(feature_config: FeatureConfig, meta: Metadata, **hparams) -> ModelConfig:
    hparams.setdefault("seq_len", feature_config.seq_len)
    return ModelConfig(
        n_content=meta.n_content,
        query_dim=len(query_columns(feature_config)),
        memory_dim=MEMORY_WIDTH,
        handcrafted_dim=len(handcrafted_layout(feature_config)),
        **hparams,
    )


def _training_items(prepared: Mapping[int, PreparedUser]) -> list[tuple[int, Window]]:
    items = []
    for uid in sorted(prepared):
        pu = prepared[uid]
        for w in pu.windows:
            if pu.features.is_question[w.start : w.end].any():
                items.append((uid, w))
    return items


def _batch_for(items, prepared, seq_len, mask_window) -> Batch:
    pieces = [prepared[uid].features.window(w.start, w.end, seq_len) for uid, w in items]
    return build_batch(pieces, seq_len, mask_window, offsets=[w.start for _, w in items])


def evaluate(
    params: dict[str, ad.Tensor],
    config: ModelConfig,
    prepared: Mapping[int, PreparedUser],
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predictions for every question event, taking each from the latest window containing it.

    Returns ``(row_ids, labels, probabilities)`` ordered by user then position.
    """
    jobs = []
    owner_of = {}
    for uid in sorted(prepared):
        pu = prepared[uid]
        owner_of[uid] = latest_window_owner(pu.windows, len(pu.features))
        jobs.extend((uid, k, w) for k, w in enumerate(pu.windows))
    probs_by_user = {uid: np.full(len(prepared[uid].features), np.nan) for uid in prepared}
    for lo in range(0, len(jobs), batch_size):
        chunk = jobs[lo : lo + batch_size]
        batch = _batch_for([(uid, w) for uid, _, w in chunk], prepared, config.seq_len, config.window)
        probs = predict(params, config, batch)
        for b, (uid, k, w) in enumerate(chunk):
            n = len(w)
            owned = owner_of[uid][w.start : w.end] == k
            pos = np.arange(w.start, w.end)[owned]
            probs_by_user[uid][pos] = probs[b, config.seq_len - n :][owned]
    row_ids, labels, scores = [], [], []
    for uid in sorted(prepared):
        ft = prepared[uid].features
        q = ft.is_question
        row_ids.append(ft.row_ids[q])
        labels.append(ft.labels[q])
        scores.append(probs_by_user[uid][q])
    return np.concatenate(row_ids), np.concatenate(labels).astype(np.int64), np.concatenate(scores)


def question_mean_baseline(
    train_histories: Iterable[UserHistory], eval_histories: Iterable[UserHistory]
) -> tuple[np.ndarray, np.ndarray]:
    """Score each evaluation question by its mean correctness over training users (global mean if unseen)."""
    attempts: dict[int, int] = {}
    correct: dict[int, int] = {}
    for h in train_histories:
        for e in h.events:
            if not e.is_lecture:
                attempts[e.content_id] = attempts.get(e.content_id, 0) + 1
                correct[e.content_id] = correct.get(e.content_id, 0) + int(e.answered_correctly)
    total = sum(attempts.values())
    overall = sum(correct.values()) / total if total else 0.5
    labels, scores = [], []
    for h in eval_histories:
        for e in h.events:
            if e.is_lecture:
                continue
            n = attempts.get(e.content_id, 0)
            scores.append(correct[e.content_id] / n if n else overall)
            labels.append(int(e.answered_correctly))
    return np.asarray(labels), np.asarray(scores)


def _copy_params(params: dict[str, ad.Tensor]) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(t.data.copy(), requires_grad=True, name=k, dtype=t.data.dtype) for k, t in params.items()}


def train(
    histories: Mapping[int, UserHistory],
    meta: Metadata,
    model_hparams: Mapping | None = None,
    train_config: TrainConfig | None = None,
    feature_options: Mapping | None = None,
    out_dir: str | Path | None = None,
    checkpoint_extra: dict | None = None,
) -> TrainResult:
    """Split users, fit features on the training split, run both learning-rate phases.

    ``model_hparams`` are :class:`ModelConfig` fields other than the feature
    widths (``seq_len`` defaults to 64 here).  When ``out_dir`` is given,
    ``metrics.jsonl`` and the best-AUC ``model.ckpt`` are written there.
    """
    tc = train_config or TrainConfig()
    hp = {"seq_len": 64, "d_model": 64, "n_heads": 2, "embed_dim": 64, **dict(model_hparams or {})}
    train_users, val_users = split_users(histories.keys(), tc.val_fraction, tc.seed)
    if set(train_users) & set(val_users):
        raise AssertionError("train and validation users overlap")

    stats = fit_standardization(histories[u] for u in train_users)
    feature_config = FeatureConfig(
        n_questions=meta.n_questions,
        n_tags=meta.n_tags,
        seq_len=hp["seq_len"],
        standardization=stats,
        **dict(feature_options or {}),
    )
    config = model_config_for(feature_config, meta, **hp)
    stride = tc.stride or max(1, config.seq_len // 2)
    train_prep = prepare_users(histories, train_users, meta, feature_config, stride)
    val_prep = prepare_users(histories, val_users, meta, feature_config, stride)
    items = _training_items(train_prep)
    if not items:
        raise ValueError("no training windows with question events")
    if any(uid in val_prep for uid, _ in items):
        raise AssertionError("validation user found in training windows")

    params = init_params(config, tc.seed)
    state = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")

    metrics: list[dict] = []
    best_auc, best_epoch, best_params = -np.inf, 0, _copy_params(params)
    schedule = [(1, tc.lr1)] * tc.epochs_phase1 + [(2, tc.lr2)] * tc.epochs_phase2
    step = 0
    for epoch, (phase, lr) in enumerate(schedule, start=1):
        t0 = time.perf_counter()
        order = np.random.default_rng([tc.seed, 7, epoch]).permutation(len(items))
        losses, weights = [], []
        for lo in range(0, len(order), tc.batch_size):
            chunk = [items[k] for k in order[lo : lo + tc.batch_size]]
            batch = _batch_for(chunk, train_prep, config.seq_len, config.window)
            step += 1
            for p in params.values():
                p.grad = None
            value = loss(params, config, batch, train=True, seed=tc.seed, step=step)
            if not np.isfinite(value.data).all():
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
            ad.backward(value)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            if tc.grad_clip is not None:
                norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
                if norm > tc.grad_clip:
                    grads = {k: g * (tc.grad_clip / norm) for k, g in grads.items()}
            try:
                adam_step({k: p.data for k, p in params.items()}, grads, state, lr, tc.beta1, tc.beta2, tc.eps)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, step {step}: {exc}") from None
            losses.append(value.item())
            weights.append(int(batch.loss_mask.sum()))
        train_loss = float(np.average(losses, weights=weights))
        _, labels, scores = evaluate(params, config, val_prep)
        val_auc = roc_auc(labels, scores)
        wall = time.perf_counter() - t0
        rec = {
            "epoch": epoch,
            "phase": phase,
            "lr": lr,
            "train_loss": train_loss,
            "val_auc": val_auc,
            "wall_seconds": round(wall, 3) if tc.log_wall_time else None,
        }
        metrics.append(rec)
        log.info("epoch %d phase %d lr %g loss %.5f val_auc %.5f (%.1fs)", epoch, phase, lr, train_loss, val_auc, wall)
        if val_auc > best_auc:
            best_auc, best_epoch, best_params = val_auc, epoch, _copy_params(params)
            if out is not None:
                extra = {
                    "feature_config": feature_config.to_dict(),
                    "epoch": epoch,
                    "val_auc": val_auc,
                    "stride": stride,
                    "val_users": val_users,
                }
                extra.update(checkpoint_extra or {})
                save_checkpoint(best_params, config, out / "model.ckpt", extra=extra)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
    return TrainResult(metrics, best_params, config, feature_config, train_users, val_users, best_epoch, params)


def micro_problem(seed: int = 0, n_users: int = 2, seq_len: int = 12, d_model: int = 8):
    """A tiny double-precision problem (params, config, batch) for gradient checks.

    Each user's first ``seq_len`` events form one window; dropout is off.
    """
    from .synth import SynthConfig, generate

    data = generate(
        SynthConfig(
            n_users=n_users,
            n_questions=10,
            n_lectures=2,
            n_tags=4,
            events_per_user=(seq_len, seq_len + 4),
            lecture_prob=0.1,
            max_tags_per_question=2,
            seed=seed,
        )
    )
    histories = list(data.histories.values())
    fc = FeatureConfig(
        n_questions=data.meta.n_questions,
        n_tags=data.meta.n_tags,
        seq_len=seq_len,
        standardization=fit_standardization(histories),
    )
    config = model_config_for(fc, data.meta, d_model=d_model, embed_dim=d_model, n_heads=2, dropout_rate=0.0)
    pieces = []
    for h in histories:
        w = make_windows(h, seq_len, seq_len)[0]
        pieces.append(user_features(h, data.meta, fc).window(w.start, w.end, seq_len))
    batch = build_batch(pieces, seq_len)
    return init_params(config, seed), config, batch
