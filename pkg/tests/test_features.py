from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from containerkt.events import ContentType, InteractionEvent, LectureMeta, LectureType, Metadata, QuestionMeta, UserHistory
from containerkt.features import (
    FeatureConfig,
    UserAggregateState,
    commit_container,
    compute_memory_features,
    compute_query_features,
    fit_standardization,
    handcrafted_layout,
    memory_columns,
    query_columns,
    snapshot_handcrafted,
    stream_user,
    user_features,
)
from containerkt.synth import SynthConfig, generate

STATS = {"time_delta": (0.0, 1.0), "log_timestamp": (0.0, 1.0), "elapsed_time": (20000.0, 5000.0)}


@pytest.fixture
def meta():
    questions = {
        0: QuestionMeta(0, 2, 1, frozenset({0, 3})),
        1: QuestionMeta(1, 0, 5, frozenset({1})),
        2: QuestionMeta(2, 3, 5, frozenset({1, 2})),
    }
    lectures = {10: LectureMeta(10, 2, 5, LectureType.CONCEPT)}
    return Metadata(questions, lectures, n_tags=4)


@pytest.fixture
def config():
    return FeatureConfig(n_questions=3, n_tags=4, seq_len=8, standardization=STATS)


def ev(row, ts, cid, container, answer=None, correct=None, elapsed=None, expl=None, lecture=False):
    ctype = ContentType.LECTURE if lecture else ContentType.QUESTION
    return InteractionEvent(row, 1, ts, cid, ctype, container, answer, correct, elapsed, expl)


def col(config, name):
    return [n for n, _ in handcrafted_layout(config)].index(name)


class TestStandardization:
    def test_two_points(self):
        h = UserHistory(1, [ev(0, 0, 0, 0, 0, True, 0), ev(1, 5, 1, 1, 0, True, 2)])
        stats = fit_standardization([h])
        assert stats["elapsed_time"] == (1.0, 1.0)
        cfg = FeatureConfig(3, 4, 8, standardization=stats)
        assert [cfg.standardize("elapsed_time", v) for v in (0, 2)] == [-1.0, 1.0]

    def test_log_timestamp_zero(self, meta, config):
        qf = compute_query_features([ev(0, 0, 0, 0, 0, True)], meta, config)
        assert qf.dense[0, query_columns(config).index("log_timestamp_std")] == 0.0

    def test_zero_variance_error(self):
        h = UserHistory(1, [ev(0, 0, 0, 0, 0, True, 7), ev(1, 5, 1, 1, 0, True, 7)])
        with pytest.raises(ValueError, match="elapsed_time"):
            fit_standardization([h])

    def test_too_few_observations(self):
        h = UserHistory(1, [ev(0, 0, 0, 0, 0, True, 7), ev(1, 5, 1, 1, 0, True, None)])
        with pytest.raises(ValueError, match="at least 2"):
            fit_standardization([h])

    def test_fitted_transform_is_standard(self, small_synth):
        hist = list(small_synth.histories.values())
        stats = fit_standardization(hist)
        cfg = FeatureConfig(small_synth.meta.n_questions, small_synth.meta.n_tags, 10_000, standardization=stats)
        cols = query_columns(cfg)
        td, lt = [], []
        el = []
        for h in hist:
            qf = compute_query_features(h.events, small_synth.meta, cfg)
            td.extend(qf.dense[:, cols.index("time_delta_std")])
            lt.extend(qf.dense[:, cols.index("log_timestamp_std")])
            mem = compute_memory_features(h.events, cfg)
            present = [e.elapsed_time_ms is not None for e in h.events]
            el.extend(mem[present, memory_columns().index("elapsed_std")])
        for values in (td, lt, el):
            v = np.asarray(values)
            assert abs(v.mean()) <= 1e-9
            assert abs(v.var() - 1.0) <= 1e-9

    def test_missing_stats_error(self, meta):
        cfg = FeatureConfig(3, 4, 8)
        with pytest.raises(KeyError, match="fit_standardization"):
            compute_query_features([ev(0, 0, 0, 0, 0, True)], meta, cfg)


class TestQueryFeatures:
    def test_container_delta(self, meta, config):
        prev = ev(0, 0, 0, 4, 0, True)
        qf = compute_query_features([ev(1, 9, 1, 5, 0, True)], meta, config, previous=prev)
        assert qf.dense[0, query_columns(config).index("container_delta_scaled")] == pytest.approx(0.001)

    def test_content_type_delta(self, meta, config):
        window = [ev(0, 0, 0, 0, 0, True), ev(1, 5, 10, 1, lecture=True), ev(2, 9, 1, 2, 1, False)]
        qf = compute_query_features(window, meta, config)
        c = query_columns(config).index("content_type_delta")
        assert qf.dense[:, c].tolist() == [0.0, 1.0, -1.0]

    def test_position_norm(self, meta, config):
        window = [ev(k, k, k % 3, k, 0, True) for k in range(8)]
        qf = compute_query_features(window, meta, config)
        pos = qf.dense[:, query_columns(config).index("position_norm")]
        assert pos[-1] == 1.0
        np.testing.assert_allclose(pos, np.arange(1, 9) / 8)

    def test_onehots(self, meta, config):
        qf = compute_query_features([ev(0, 0, 2, 0, 1, False), ev(1, 3, 10, 1, lecture=True)], meta, config)
        cols = query_columns(config)
        part = qf.dense[:, : 7]
        ans = qf.dense[:, cols.index("correct_answer_0") : cols.index("correct_answer_3") + 1]
        tags = qf.dense[:, cols.index("tag_0") : cols.index("tag_3") + 1]
        assert part.sum(axis=1).tolist() == [1.0, 0.0]
        assert part[0, 4] == 1.0
        assert ans.sum(axis=1).tolist() == [1.0, 0.0] and ans[0, 3] == 1.0
        assert tags[0].tolist() == [0, 1, 1, 0]
        assert qf.content_index.tolist() == [2, 3]

    def test_unknown_content(self, meta, config):
        with pytest.raises(KeyError, match="content_id 99"):
            compute_query_features([ev(0, 0, 99, 0, 0, True)], meta, config)

    def test_window_too_long(self, meta, config):
        with pytest.raises(ValueError, match="seq_len"):
            compute_query_features([ev(k, k, 0, k, 0, True) for k in range(9)], meta, config)


class TestMemoryFeatures:
    def test_correct_with_explanation(self, config):
        m = compute_memory_features([ev(0, 0, 0, 0, 1, True, 20000, True)], config)[0]
        assert m[3:6].tolist() == [0, 1, 0]
        assert m[0:3].tolist() == [0, 1, 0]
        assert m[6] == 0.0

    def test_lecture_absent(self, config):
        m = compute_memory_features([ev(0, 0, 10, 0, lecture=True)], config)[0]
        assert m[0:3].tolist() == [0, 0, 1]
        assert m[3:6].tolist() == [0, 0, 1]
        assert m[7:].tolist() == [0, 0, 0, 0, 1]
        assert m[6] == 0.0

    def test_incorrect_choice_three(self, config):
        m = compute_memory_features([ev(0, 0, 0, 0, 3, False, 25000, False)], config)[0]
        assert m[3:6].tolist() == [1, 0, 0]
        assert m[7:].tolist() == [0, 0, 0, 1, 0]
        assert m[6] == pytest.approx(1.0)

    def test_blocks_sum_to_one(self, small_synth):
        cfg = FeatureConfig(1, small_synth.meta.n_tags, 8, standardization=fit_standardization(small_synth.histories.values()))
        for h in small_synth.histories.values():
            m = compute_memory_features(h.events, cfg)
            for lo, hi in ((0, 3), (3, 6), (7, 12)):
                assert (m[:, lo:hi].sum(axis=1) == 1).all()


class TestCommit:
    def test_counter_addition(self, meta, config):
        s = UserAggregateState(4, answered_total=2, answered_correct=1)
        s.buffer(ev(0, 0, 0, 7, 2, True))
        s.buffer(ev(1, 0, 1, 7, 0, True))
        commit_container(s, meta)
        assert (s.answered_total, s.answered_correct) == (4, 3)
        assert s.pending == []

    def test_empty_buffer(self, meta):
        s = UserAggregateState(4, answered_total=2)
        before = s.part_attempts.copy()
        assert commit_container(s, meta) is s
        assert s.answered_total == 2 and (s.part_attempts == before).all()

    def test_lecture_routing(self, meta):
        s = UserAggregateState(4)
        s.buffer(ev(0, 0, 10, 3, lecture=True))
        commit_container(s, meta)
        assert s.lecture_part[4] == 1
        assert s.lecture_type[LectureType.CONCEPT.index] == 1
        assert s.answered_total == 0

    def test_mixed_containers(self, meta):
        s = UserAggregateState(4)
        s.buffer(ev(0, 0, 0, 1, 0, True))
        s.buffer(ev(1, 0, 1, 2, 0, True))
        with pytest.raises(ValueError, match="mixes containers"):
            commit_container(s, meta)


class TestSnapshot:
    def test_overall_ratio(self, meta, config):
        s = UserAggregateState(4, answered_total=4, answered_correct=3)
        v = snapshot_handcrafted(s, ev(9, 0, 0, 9, 0, True), meta, config)
        assert v[col(config, "correct_ratio")] == 0.75

    def test_fresh_user(self, meta, config):
        v = snapshot_handcrafted(UserAggregateState(4), ev(0, 0, 0, 0, 0, True), meta, config)
        assert (v == 0).all()
        assert v.size == len(handcrafted_layout(config))

    def test_answer_ratios(self, meta, config):
        s = UserAggregateState(4)
        for k, a in enumerate([0, 0, 1, 3]):
            s.buffer(ev(k, 0, 0, 0, a, a == 2))
        commit_container(s, meta)
        v = snapshot_handcrafted(s, ev(9, 5, 1, 1, 0, True), meta, config)
        start = col(config, "user_answer0_ratio")
        assert v[start : start + 4].tolist() == [0.5, 0.25, 0.0, 0.25]

    def test_raw_counts(self, meta):
        cfg = FeatureConfig(3, 4, 8, standardization=STATS, count_transform="raw")
        s = UserAggregateState(4, answered_total=5, answered_correct=1)
        v = snapshot_handcrafted(s, ev(0, 0, 0, 0, 0, True), meta, cfg)
        assert v[col(cfg, "answered_count")] == 5.0

    def test_target_width(self, meta):
        natural = len(handcrafted_layout(FeatureConfig(3, 4, 8)))
        cfg = FeatureConfig(3, 4, 8, standardization=STATS, target_width=90)
        assert len(handcrafted_layout(cfg)) == 90 > natural
        assert snapshot_handcrafted(UserAggregateState(4), ev(0, 0, 0, 0, 0, True), meta, cfg).size == 90
        with pytest.raises(ValueError):
            handcrafted_layout(FeatureConfig(3, 4, 8, target_width=natural - 1))


class TestStream:
    def test_shared_container_identical(self, meta, config):
        h = UserHistory(1, [ev(0, 0, 0, 0, 2, True, 100, True), ev(1, 5, 1, 1, 0, False, 100, False), ev(2, 5, 2, 1, 3, True, 100, True)])
        m = stream_user(h, meta, config)
        assert (m[0] == 0).all()
        np.testing.assert_array_equal(m[1, :2], m[2, :2])
        assert m[1, col(config, "correct_ratio")] == 1.0

    def test_first_event_zero(self, small_synth):
        cfg = FeatureConfig(1, small_synth.meta.n_tags, 8, standardization=fit_standardization(small_synth.histories.values()))
        for h in small_synth.histories.values():
            assert (stream_user(h, small_synth.meta, cfg)[0] == 0).all()


def batch_oracle(history, meta, config):
    """Recompute every position from scratch over events of strictly earlier container runs."""
    layout = handcrafted_layout(config)
    names = [n for n, _ in layout]
    cnt = (lambda x: float(np.log1p(x))) if config.count_transform == "log1p" else float
    runs, r, prev = [], -1, None
    for e in history.events:
        if e.task_container_id != prev:
            r += 1
            prev = e.task_container_id
        runs.append(r)

    def ratio(a, b):
        return a / b if b else config.ratio_default

    out = np.zeros((len(history.events), len(names)))
    for i, e in enumerate(history.events):
        past = [p for p, rp in zip(history.events, runs) if rp < runs[i]]
        qs = [p for p in past if not p.is_lecture]
        lecs = [meta.lectures[p.content_id] for p in past if p.is_lecture]
        v = dict.fromkeys(names, 0.0)
        n_correct = sum(p.answered_correctly for p in qs)
        v["correct_ratio"] = ratio(n_correct, len(qs))
        v["answered_count"] = cnt(len(qs))
        same = [p for p in qs if p.content_id == e.content_id] if not e.is_lecture else []
        v["content_correct_ratio"] = ratio(sum(p.answered_correctly for p in same), len(same))
        v["content_attempt_count"] = cnt(len(same))
        for part in range(1, 8):
            in_part = [p for p in qs if meta.questions[p.content_id].part == part]
            v[f"part{part}_correct_ratio"] = ratio(sum(p.answered_correctly for p in in_part), len(in_part))
            v[f"part{part}_attempt_count"] = cnt(len(in_part))
        cur = [meta.lectures[e.content_id].tag] if e.is_lecture else sorted(meta.questions[e.content_id].tags)
        for s, tag in enumerate(cur[: config.max_question_tags]):
            tagged = [p for p in qs if tag in meta.questions[p.content_id].tags]
            v[f"cur_tag{s}_correct_ratio"] = ratio(sum(p.answered_correctly for p in tagged), len(tagged))
            v[f"cur_tag{s}_attempt_count"] = cnt(len(tagged))
            v[f"lecture_cur_tag{s}_count"] = cnt(sum(1 for lec in lecs if lec.tag == tag))
        for part in range(1, 8):
            v[f"lecture_part{part}_count"] = cnt(sum(1 for lec in lecs if lec.part == part))
        for lt in LectureType:
            v[f"lecture_type_{lt.name.lower()}_count"] = cnt(sum(1 for lec in lecs if lec.type_of is lt))
        known = [p for p in qs if p.had_explanation is not None]
        kc = [p for p in known if p.answered_correctly]
        ki = [p for p in known if not p.answered_correctly]
        v["explanation_after_correct_ratio"] = ratio(sum(p.had_explanation for p in kc), len(kc))
        v["explanation_after_incorrect_ratio"] = ratio(sum(p.had_explanation for p in ki), len(ki))
        v["explanation_seen_count"] = cnt(sum(p.had_explanation for p in known))
        timed = [p.elapsed_time_ms for p in qs if p.elapsed_time_ms is not None]
        if timed:
            v["mean_elapsed_std"] = config.standardize("elapsed_time", sum(timed) / len(timed))
        answers = Counter(p.user_answer for p in qs)
        for a in range(4):
            v[f"user_answer{a}_ratio"] = ratio(answers[a], len(qs))
        out[i] = [v[n] for n in names]
    return out


def assert_matches_oracle(stream, oracle, layout):
    kinds = np.array([k for _, k in layout])
    # counts are exact; ratios and means within 1e-12
    np.testing.assert_array_equal(stream[:, kinds == "count"], oracle[:, kinds == "count"])
    np.testing.assert_allclose(stream[:, kinds != "count"], oracle[:, kinds != "count"], rtol=0, atol=1e-12)


class TestStreamingBatchEquivalence:
    def test_random_history_200_events(self):
        data = generate(SynthConfig(n_users=2, n_questions=60, n_lectures=8, n_tags=12, events_per_user=(200, 200), lecture_prob=0.1, seed=11))
        cfg = FeatureConfig(60, 12, 64, standardization=fit_standardization(data.histories.values()))
        layout = handcrafted_layout(cfg)
        for h in data.histories.values():
            assert_matches_oracle(stream_user(h, data.meta, cfg), batch_oracle(h, data.meta, cfg), layout)

    def test_raw_counts_mode(self, small_synth):
        cfg = FeatureConfig(1, small_synth.meta.n_tags, 8, standardization=fit_standardization(small_synth.histories.values()), count_transform="raw")
        layout = handcrafted_layout(cfg)
        for h in small_synth.histories.values():
            assert_matches_oracle(stream_user(h, small_synth.meta, cfg), batch_oracle(h, small_synth.meta, cfg), layout)

    def test_all_tags_mode_width(self, small_synth):
        cfg = FeatureConfig(1, small_synth.meta.n_tags, 8, standardization=fit_standardization(small_synth.histories.values()), tag_mode="all")
        h = next(iter(small_synth.histories.values()))
        m = stream_user(h, small_synth.meta, cfg)
        assert m.shape[1] == len(handcrafted_layout(cfg))


class TestStreamProperties:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 5000), st.data())
    def test_leakage_invariance(self, seed, data):
        synth = generate(SynthConfig(n_users=1, n_questions=20, n_lectures=4, n_tags=6, events_per_user=(10, 60), lecture_prob=0.15, seed=seed))
        cfg = FeatureConfig(20, 6, 8, standardization={"time_delta": (0, 1), "log_timestamp": (0, 1), "elapsed_time": (20000, 5000)})
        h = synth.histories[0]
        runs, r, prev = [], -1, None
        for e in h.events:
            if e.task_container_id != prev:
                r, prev = r + 1, e.task_container_id
            runs.append(r)
        cut = data.draw(st.integers(0, runs[-1]))
        rng = np.random.default_rng(seed)
        altered = []
        from dataclasses import replace

        for e, rr in zip(h.events, runs):
            if rr >= cut and not e.is_lecture:
                e = replace(
                    e,
                    answered_correctly=bool(rng.integers(0, 2)),
                    user_answer=int(rng.integers(0, 4)),
                    elapsed_time_ms=int(rng.integers(0, 90000)),
                    had_explanation=bool(rng.integers(0, 2)),
                )
            altered.append(e)
        base = stream_user(h, synth.meta, cfg)
        other = stream_user(UserHistory(0, altered), synth.meta, cfg)
        in_run = np.array(runs) <= cut
        np.testing.assert_array_equal(base[in_run], other[in_run])

    def test_ranges_and_monotone_counts(self, small_synth):
        cfg = FeatureConfig(1, small_synth.meta.n_tags, 8, standardization=fit_standardization(small_synth.histories.values()), count_transform="raw")
        layout = handcrafted_layout(cfg)
        kinds = np.array([k for _, k in layout])
        names = [n for n, _ in layout]
        global_counts = [i for i, n in enumerate(names) if kinds[i] == "count" and "cur_tag" not in n and "content_" not in n]
        widths = set()
        for h in small_synth.histories.values():
            m = stream_user(h, small_synth.meta, cfg)
            widths.add(m.shape[1])
            ratios = m[:, kinds == "ratio"]
            assert ((ratios >= 0) & (ratios <= 1)).all()
            assert (m[:, kinds == "count"] >= 0).all()
            assert (np.diff(m[:, global_counts], axis=0) >= 0).all()
        assert widths == {len(layout)}


class TestUserFeatures:
    def test_window_rewrites_position(self, small_synth):
        meta = small_synth.meta
        cfg = FeatureConfig(meta.n_questions, meta.n_tags, 16, standardization=fit_standardization(small_synth.histories.values()))
        h = next(iter(small_synth.histories.values()))
        ft = user_features(h, meta, cfg)
        w = ft.window(3, 13, 16)
        assert len(w) == 10
        np.testing.assert_allclose(w.query[:, -1], np.arange(7, 17) / 16)
        direct = compute_query_features(h.events[3:13], meta, cfg, previous=h.events[2], offset=6)
        np.testing.assert_array_equal(w.query, direct.dense)
        np.testing.assert_array_equal(w.content_index, direct.content_index)
