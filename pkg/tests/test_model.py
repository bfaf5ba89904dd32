import math
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from containerkt import autodiff as ad
from containerkt.model import (
    MAGIC,
    BadMagicError,
    Batch,
    ModelConfig,
    ShapeMismatchError,
    TruncatedCheckpointError,
    VersionMismatchError,
    forward,
    init_params,
    load_checkpoint,
    loss,
    param_shapes,
    predict,
    save_checkpoint,
)
from containerkt.plan import build_plan
from containerkt.trainer import build_batch, micro_problem


@pytest.fixture(scope="module")
def micro():
    return micro_problem(seed=1)


def synthetic_batch(rng, containers_list, config, L):
    """Random features around given container sequences, left-padded to L."""
    B = len(containers_list)
    batch = Batch(
        content_index=rng.integers(0, config.n_content, (B, L)),
        query=rng.normal(size=(B, L, config.query_dim)),
        memory=rng.normal(size=(B, L, config.memory_dim)),
        handcrafted=rng.normal(size=(B, L, config.handcrafted_dim)),
        shift_index=np.full((B, L), -1),
        allowed=np.zeros((B, L, L), dtype=bool),
        pad_mask=np.zeros((B, L), dtype=bool),
        labels=rng.integers(0, 2, (B, L)).astype(float),
        is_question=np.ones((B, L), dtype=bool),
    )
    for b, cont in enumerate(containers_list):
        n = len(cont)
        p = L - n
        plan = build_plan(cont, config.window)
        batch.shift_index[b, p:] = np.where(plan.shift_index >= 0, plan.shift_index + p, -1)
        batch.allowed[b, p:, p:] = plan.allowed
        batch.pad_mask[b, p:] = True
    return batch


def small_config(**kw):
    base = dict(n_content=9, query_dim=5, memory_dim=4, handcrafted_dim=3, d_model=8, n_heads=2, seq_len=16, embed_dim=6, dropout_rate=0.3)
    base.update(kw)
    return ModelConfig(**base)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            small_config(d_model=9)

    def test_round_trip_dict(self):
        c = small_config(mask_window=5)
        assert ModelConfig.from_dict(c.to_dict()) == c

    def test_full_scale_defaults(self):
        c = ModelConfig(n_content=3, query_dim=1, memory_dim=1, handcrafted_dim=0)
        assert (c.d_model, c.n_heads, c.seq_len, c.dropout_rate, c.embed_dim) == (512, 4, 400, 0.2, 512)


class TestForward:
    def test_zero_params_give_half(self, micro):
        params, config, batch = micro
        zeros = {k: ad.Tensor(np.zeros_like(t.data), requires_grad=True) for k, t in params.items()}
        probs = predict(zeros, config, batch)
        assert (probs == 0.5).all()

    def test_shape_and_range(self, micro):
        params, config, batch = micro
        out = forward(params, config, batch)
        assert out.shape == (len(batch), config.seq_len, 1)
        assert ((out.data > 0) & (out.data < 1)).all()

    def test_bad_feature_width(self, micro):
        params, config, batch = micro
        with pytest.raises(ValueError, match="batch.memory"):
            forward(params, config, replace(batch, memory=batch.memory[..., :-1]))

    def test_plan_mismatch(self, micro):
        params, config, batch = micro
        shift = batch.shift_index.copy()
        shift[0, 3] = 5
        with pytest.raises(ValueError, match="plan mismatch"):
            forward(params, config, replace(batch, shift_index=shift))

    def test_deterministic_with_dropout(self, micro):
        params, config, batch = micro
        config = replace(config, dropout_rate=0.2)
        a = forward(params, config, batch, train=True, seed=4, step=2).data
        b = forward(params, config, batch, train=True, seed=4, step=2).data
        c = forward(params, config, batch, train=True, seed=4, step=3).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_eval_ignores_dropout(self, micro):
        params, config, batch = micro
        a = forward(params, replace(config, dropout_rate=0.5), batch).data
        b = forward(params, replace(config, dropout_rate=0.0), batch).data
        assert np.array_equal(a, b)

    def test_without_handcrafted(self, micro):
        _, config, batch = micro
        config = replace(config, use_handcrafted=False)
        params = init_params(config, 0)
        a = predict(params, config, batch)
        b = predict(params, config, replace(batch, handcrafted=batch.handcrafted + 1.0))
        assert np.array_equal(a, b)


class TestLeakage:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=2, max_size=8), st.integers(1, 16), st.integers(0, 2**31))
    def test_future_outcomes_do_not_reach_run(self, sizes, window, seed):
        rng = np.random.default_rng(seed)
        containers = np.repeat(np.arange(len(sizes)), sizes)
        L = 16
        containers = containers[:L]
        config = small_config(mask_window=window)
        params = init_params(config, seed % 1000)
        batch = synthetic_batch(rng, [containers], config, L)
        base = predict(params, config, batch)
        n = len(containers)
        p = L - n
        run_of = np.concatenate([np.full(p, -1), containers])
        r = int(rng.integers(0, containers[-1] + 1))
        later = run_of >= r
        strictly_later = run_of > r
        pert = replace(
            batch,
            memory=np.where(later[None, :, None], rng.normal(size=batch.memory.shape), batch.memory),
            labels=np.where(later[None], 1 - batch.labels, batch.labels),
            handcrafted=np.where(strictly_later[None, :, None], rng.normal(size=batch.handcrafted.shape), batch.handcrafted),
        )
        after = predict(params, config, pert)
        in_run = run_of == r
        assert np.array_equal(base[0, in_run], after[0, in_run])

    def test_earlier_memory_does_reach_later_run(self):
        rng = np.random.default_rng(0)
        config = small_config()
        params = init_params(config, 0)
        batch = synthetic_batch(rng, [np.array([0, 0, 1, 1, 2])], config, 16)
        base = predict(params, config, batch)
        mem = batch.memory.copy()
        mem[0, 11] += 1.0  # first event of run 0
        after = predict(params, config, replace(batch, memory=mem))
        assert np.array_equal(base[0, 11:13], after[0, 11:13])
        assert not np.array_equal(base[0, 13:], after[0, 13:])

    def test_padding_does_not_affect_real_positions(self):
        rng = np.random.default_rng(1)
        config = small_config()
        params = init_params(config, 0)
        batch = synthetic_batch(rng, [np.array([0, 1, 1, 2, 3])], config, 16)
        base = predict(params, config, batch)
        pad = ~batch.pad_mask
        noisy = replace(
            batch,
            query=np.where(pad[..., None], 9.0, batch.query),
            memory=np.where(pad[..., None], -9.0, batch.memory),
            handcrafted=np.where(pad[..., None], 5.0, batch.handcrafted),
        )
        after = predict(params, config, noisy)
        assert np.array_equal(base[batch.pad_mask], after[batch.pad_mask])


class TestLoss:
    def test_single_question_half_is_ln2(self):
        config = small_config()
        params = {k: ad.Tensor(np.zeros(s), requires_grad=True) for k, s in param_shapes(config).items()}
        batch = synthetic_batch(np.random.default_rng(0), [np.array([0])], config, 16)
        batch.labels[:] = 1.0
        assert loss(params, config, batch).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_lecture_tail_contributes_nothing(self, micro):
        params, config, batch = micro
        base = loss(params, config, batch).item()
        is_q = batch.is_question.copy()
        labels = batch.labels.copy()
        # turn the final positions into lectures with arbitrary labels
        is_q[:, -3:] = False
        labels[:, -3:] = 1 - labels[:, -3:]
        with_tail = loss(params, config, replace(batch, is_question=is_q, labels=labels)).item()
        without = loss(params, config, replace(batch, is_question=is_q)).item()
        assert with_tail == without
        assert with_tail != base

    def test_no_questions_error(self, micro):
        params, config, batch = micro
        with pytest.raises(ValueError, match="no question"):
            loss(params, config, replace(batch, is_question=np.zeros_like(batch.is_question)))

    def test_gradcheck_micro(self, micro):
        params, config, batch = micro
        err = ad.gradcheck(lambda: loss(params, config, batch), list(params.values()))
        assert err <= 1e-5

    def test_gradients_deterministic(self, micro):
        params, config, batch = micro
        config = replace(config, dropout_rate=0.2)
        grads = []
        for _ in range(2):
            for p in params.values():
                p.grad = None
            ad.backward(loss(params, config, batch, train=True, seed=3, step=1))
            grads.append({k: p.grad.copy() for k, p in params.items()})
        for k in params:
            assert np.array_equal(grads[0][k], grads[1][k])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, micro, tmp_path):
        params, config, batch = micro
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, config, path, extra={"note": "x"})
        loaded, cfg, extra = load_checkpoint(path)
        assert cfg == config and extra == {"note": "x"}
        for k in params:
            assert loaded[k].data.tobytes() == params[k].data.tobytes()
        assert np.array_equal(predict(params, config, batch), predict(loaded, cfg, batch))

    def test_header_layout(self, micro, tmp_path):
        params, config, _ = micro
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, config, path)
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        version, n = struct.unpack("<II", raw[4:12])
        assert version == 1
        body = len(raw) - 12 - n
        assert body == sum(t.data.nbytes for t in params.values())

    def test_bad_magic(self, micro, tmp_path):
        params, config, _ = micro
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, config, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError, match="bad magic"):
            load_checkpoint(path)

    def test_version_mismatch(self, micro, tmp_path):
        params, config, _ = micro
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, config, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(path)

    def test_truncated(self, micro, tmp_path):
        params, config, _ = micro
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, config, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)

    def test_shape_mismatch_names_tensor(self, micro, tmp_path):
        params, config, _ = micro
        path = tmp_path / "m.ckpt"
        bad = dict(params)
        bad["attn.wq"] = ad.Tensor(np.zeros((3, 3)))
        save_checkpoint(bad, config, path)
        with pytest.raises(ShapeMismatchError, match=r"shape mismatch.*'attn.wq'"):
            load_checkpoint(path)


class TestBuildBatch:
    def test_padding_offsets_plan(self, small_synth):
        from containerkt.features import FeatureConfig, fit_standardization, user_features

        meta = small_synth.meta
        hist = next(iter(small_synth.histories.values()))
        fc = FeatureConfig(meta.n_questions, meta.n_tags, 64, standardization=fit_standardization(small_synth.histories.values()))
        ft = user_features(hist, meta, fc).window(0, 10, 16)
        batch = build_batch([ft], 16)
        plan = build_plan(ft.containers, 16)
        assert not batch.pad_mask[0, :6].any() and batch.pad_mask[0, 6:].all()
        assert np.array_equal(batch.shift_index[0, 6:], np.where(plan.shift_index >= 0, plan.shift_index + 6, -1))
        assert (batch.shift_index[0, :6] == -1).all()
        assert not batch.allowed[0, :6].any() and not batch.allowed[0, :, :6].any()
        assert np.array_equal(batch.allowed[0, 6:, 6:], plan.allowed)
        assert np.allclose(batch.query[0, 6:, -1], (6 + np.arange(10) + 1) / 16)
