import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ecrl.autograd import (
    Adam,
    AdamState,
    ConfigError,
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    adam_step,
    attention_params,
    backward,
    bilstm,
    bilstm_params,
    corrupt_gradient,
    cosine_sim,
    grad_check,
    lstm_cell,
    lstm_params,
    lstm_sequence,
    matmul,
    self_attention,
    softmax,
)
from ecrl.autograd.tensor import default_dtype

import oracles


scalar_lstm_step = oracles.lstm_step
scalar_lstm_run = oracles.lstm_run


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(3, 5))
        np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(m)).data, m)

    def test_zero(self, rng):
        m = rng.normal(size=(4, 3))
        assert np.all(matmul(Tensor(m), Tensor(np.zeros((3, 2)))).data == 0)

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        ref = [[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)]
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, ref, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_shift_invariance(self):
        a = softmax(Tensor([3.0, 5.0])).data
        b = softmax(Tensor([1003.0, 1005.0])).data
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_direct_formula(self):
        e = [math.exp(v) for v in (1, 2, 3)]
        ref = [v / sum(e) for v in e]
        np.testing.assert_allclose(softmax(Tensor([1.0, 2.0, 3.0])).data, ref, atol=1e-12)

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            softmax(Tensor(np.zeros((2, 0))), axis=-1)

    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                  elements=st.floats(-50, 50)))
    def test_normalised(self, x):
        for axis in (0, 1):
            p = softmax(Tensor(x), axis=axis).data
            assert np.all(p >= 0)
            np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-9)


class TestCosine:
    def test_identity(self, rng):
        v = rng.normal(size=5)
        assert cosine_sim(Tensor(v), Tensor(v)).item() == pytest.approx(1.0, abs=1e-12)

    def test_antipodal(self, rng):
        v = rng.normal(size=5)
        assert cosine_sim(Tensor(v), Tensor(-v)).item() == pytest.approx(-1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_near_zero_operand_gives_zero(self):
        assert cosine_sim(Tensor([1e-10, 0.0]), Tensor([1.0, 1.0])).item() == 0.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            cosine_sim(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    @given(arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)),
           arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)))
    def test_range(self, u, v):
        c = cosine_sim(Tensor(u), Tensor(v)).item()
        assert -1 - 1e-9 <= c <= 1 + 1e-9


class TestLSTM:
    def test_zero_weights(self):
        h, c = lstm_cell(Tensor(np.ones(3)), Tensor(np.zeros(2)), Tensor(np.zeros(2)),
                         Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)))
        assert np.all(h.data == 0)

    def test_forget_saturated_keeps_cell(self, rng):
        H = 3
        b = np.zeros(4 * H)
        b[:H] = -1e4  # input gate closed
        b[H:2 * H] = 1e4  # forget gate open
        c_prev = rng.normal(size=H)
        _, c = lstm_cell(Tensor(rng.normal(size=2)), Tensor(rng.normal(size=H)), Tensor(c_prev),
                         Tensor(np.zeros((2, 4 * H))), Tensor(np.zeros((H, 4 * H))), Tensor(b))
        np.testing.assert_allclose(c.data, c_prev, atol=1e-12)

    def test_scalar_oracle(self, rng):
        p = lstm_params(rng, 3, 2, prefix="l")
        x, h, c = rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
        h1, c1 = lstm_cell(Tensor(x), Tensor(h), Tensor(c), p["l.wx"], p["l.wh"], p["l.b"])
        rh, rc = scalar_lstm_step(x, h, c, p["l.wx"].data, p["l.wh"].data, p["l.b"].data)
        np.testing.assert_allclose(h1.data, rh, atol=1e-12)
        np.testing.assert_allclose(c1.data, rc, atol=1e-12)

    def test_fused_sequence_matches_scalar_run(self, rng):
        p = lstm_params(rng, 3, 4, prefix="l")
        x = rng.normal(size=(6, 3))
        out = lstm_sequence(Tensor(x), p["l.wx"], p["l.wh"], p["l.b"]).data
        ref = scalar_lstm_run(x, p["l.wx"].data, p["l.wh"].data, p["l.b"].data)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_fused_gradients_match_cell_composition(self, rng):
        p = lstm_params(rng, 3, 2, prefix="l")
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        w = rng.normal(size=(5, 2))

        def grads(fn):
            for t in (*p.values(), x):
                t.grad = None
            with Tape() as tape:
                tape.backward((fn() * Tensor(w)).sum())
            return [t.grad.copy() for t in (*p.values(), x)]

        def composed():
            h, c = Tensor(np.zeros(2)), Tensor(np.zeros(2))
            hs = []
            for t in range(5):
                h, c = lstm_cell(x[t], h, c, p["l.wx"], p["l.wh"], p["l.b"])
                hs.append(h.reshape(1, 2))
            from ecrl.autograd import concat
            return concat(hs, axis=0)

        fused = grads(lambda: lstm_sequence(x, p["l.wx"], p["l.wh"], p["l.b"]))
        for a, b in zip(fused, grads(composed)):
            np.testing.assert_allclose(a, b, atol=1e-12)


class TestBiLSTM:
    def test_single_frame(self, rng):
        p = bilstm_params(rng, 3, 2, prefix="b")
        x = rng.normal(size=(1, 3))
        out = bilstm(Tensor(x), p, "b").data
        fw = scalar_lstm_run(x, p["b.fw.wx"].data, p["b.fw.wh"].data, p["b.fw.b"].data)
        bw = scalar_lstm_run(x, p["b.bw.wx"].data, p["b.bw.wh"].data, p["b.bw.b"].data)
        np.testing.assert_allclose(out, np.concatenate([fw, bw], axis=1), atol=1e-12)

    def test_two_unidirectional_runs(self, rng):
        p = bilstm_params(rng, 3, 2, prefix="b")
        x = rng.normal(size=(4, 3))
        out = bilstm(Tensor(x), p, "b").data
        fw = scalar_lstm_run(x, p["b.fw.wx"].data, p["b.fw.wh"].data, p["b.fw.b"].data)
        bw = scalar_lstm_run(x[::-1], p["b.bw.wx"].data, p["b.bw.wh"].data, p["b.bw.b"].data)[::-1]
        np.testing.assert_allclose(out, np.concatenate([fw, bw], axis=1), atol=1e-12)

    def test_time_reversal_symmetry(self, rng):
        p = bilstm_params(rng, 3, 2, prefix="b")
        swapped = {k.replace("b.fw", "b.tmp").replace("b.bw", "b.fw").replace("b.tmp", "b.bw"): v
                   for k, v in p.items()}
        x = rng.normal(size=(5, 3))
        out = bilstm(Tensor(x), p, "b").data
        rev = bilstm(Tensor(x[::-1].copy()), swapped, "b").data
        np.testing.assert_allclose(rev[::-1][:, [2, 3, 0, 1]], out, atol=1e-12)

    def test_padded_batch_matches_unpadded(self, rng):
        p = bilstm_params(rng, 3, 2, prefix="b")
        x = rng.normal(size=(2, 5, 3))
        out = bilstm(Tensor(x), p, "b", lengths=[5, 3]).data
        single = bilstm(Tensor(x[1, :3]), p, "b").data
        np.testing.assert_allclose(out[1, :3], single, atol=1e-12)

    def test_empty_input(self, rng):
        p = bilstm_params(rng, 3, 2, prefix="b")
        with pytest.raises(DimensionError):
            bilstm(Tensor(np.zeros((0, 3))), p, "b")


class TestSelfAttention:
    def test_single_token(self, rng):
        p = attention_params(rng, 4, prefix="a")
        x = rng.normal(size=(1, 4))
        out = self_attention(Tensor(x), p, "a").data
        np.testing.assert_allclose(out, x + x @ p["a.wv"].data, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        p = attention_params(rng, 4, prefix="a")
        _, attn = self_attention(Tensor(rng.normal(size=(6, 4))), p, "a", return_weights=True)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_explicit_loop_oracle(self, rng):
        p = attention_params(rng, 3, prefix="a")
        x = rng.normal(size=(3, 3))
        wq, wk, wv = (p[f"a.{k}"].data for k in ("wq", "wk", "wv"))
        T, D = x.shape
        q = [[sum(x[t, d] * wq[d, k] for d in range(D)) for k in range(D)] for t in range(T)]
        kk = [[sum(x[t, d] * wk[d, k] for d in range(D)) for k in range(D)] for t in range(T)]
        v = [[sum(x[t, d] * wv[d, k] for d in range(D)) for k in range(D)] for t in range(T)]
        ref = np.zeros((T, D))
        for i in range(T):
            s = [sum(q[i][d] * kk[j][d] for d in range(D)) / math.sqrt(D) for j in range(T)]
            e = [math.exp(v_) for v_ in s]
            a = [v_ / sum(e) for v_ in e]
            for d in range(D):
                ref[i, d] = x[i, d] + sum(a[j] * v[j][d] for j in range(T))
        np.testing.assert_allclose(self_attention(Tensor(x), p, "a").data, ref, atol=1e-12)


class TestBackward:
    def test_sum_of_params(self, rng):
        p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        with Tape() as tape:
            tape.backward(p.sum())
        np.testing.assert_array_equal(p.grad, np.ones((3, 2)))

    def test_unused_param_gets_zero(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        with Tape():
            backward((a * a).sum(), params=[a, b])
        np.testing.assert_array_equal(b.grad, np.zeros(3))

    def test_non_scalar_loss(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=True)
        with Tape() as tape:
            with pytest.raises(ContractError):
                tape.backward(a * 2.0)

    def test_requires_active_tape(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=True)
        with pytest.raises(ContractError):
            backward((a * 2.0).sum())

    def test_accumulation_doubles(self, rng):
        a = Tensor(rng.normal(size=4), requires_grad=True)
        with Tape() as tape:
            f = (a * a * a).sum()
            tape.backward(f)
        once = a.grad.copy()
        a.grad = None
        with Tape() as tape:
            f = (a * a * a).sum()
            tape.backward(f + f)
        np.testing.assert_allclose(a.grad, 2 * once, rtol=1e-15)

    def test_tape_replays_in_reverse_creation_order(self, rng):
        a = Tensor(rng.normal(size=2), requires_grad=True)
        with Tape() as tape:
            b = a * 2.0
            c = b + 1.0
            d = c.sum()
            outs = [rec[0] for rec in tape.records]
            assert outs == [b, c, d]
            tape.backward(d)
        assert len(tape) == 0

    def test_deterministic_forward(self, rng):
        p = bilstm_params(np.random.default_rng(0), 3, 2, prefix="b")
        x = Tensor(rng.normal(size=(5, 3)))
        assert np.array_equal(bilstm(x, p, "b").data, bilstm(x, p, "b").data)


class TestAdam:
    def test_zero_gradient_no_change(self, rng):
        p = {"w": Tensor(rng.normal(size=3), requires_grad=True)}
        before = p["w"].data.copy()
        p["w"].grad = np.zeros(3)
        adam_step(p, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["w"].data, before)

    def test_first_step_magnitude(self):
        p = {"w": Tensor([1.0, -1.0, 2.0], requires_grad=True)}
        g = np.array([0.3, -5.0, 1e-3])
        p["w"].grad = g
        adam_step(p, AdamState(), lr=0.01)
        np.testing.assert_allclose(p["w"].data - [1.0, -1.0, 2.0], -0.01 * np.sign(g), rtol=1e-4)

    def test_quadratic_convergence(self):
        w = Tensor([1.0], requires_grad=True)
        opt = Adam({"w": w}, lr=0.1)
        for _ in range(100):
            opt.zero_grad()
            with Tape() as tape:
                tape.backward((w * w).sum())
            opt.step()
        assert abs(w.item()) < 0.1

    def test_bad_lr(self):
        with pytest.raises(ConfigError):
            adam_step({}, AdamState(), lr=0.0)


class TestGradCheck:
    def test_linear_model_exact(self, rng):
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 3)))
        report = grad_check(lambda: matmul(x, w).sum(), {"w": w})
        assert report.errors["w"] < 1e-7

    def test_composite_ops(self, rng):
        p = bilstm_params(rng, 3, 2, prefix="b")
        p.update(attention_params(rng, 3, prefix="a"))
        x = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 4, 4)))
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], bool)

        def fn():
            y = self_attention(x, p, "a", key_mask=mask)
            return (bilstm(y, p, "b", lengths=[4, 2]) * w).sum()

        report = grad_check(fn, {**p, "x": x})
        assert report.passed, report.failures

    def test_corrupted_rule_detected(self, rng):
        p = lstm_params(rng, 3, 2, prefix="l")
        x = Tensor(rng.normal(size=(4, 3)))
        w = Tensor(rng.normal(size=(4, 2)))
        fn = lambda: (lstm_sequence(x, p["l.wx"], p["l.wh"], p["l.b"]) * w).sum()  # noqa: E731
        with corrupt_gradient("lstm_sequence"):
            report = grad_check(fn, p)
        assert "l.wh" in report.failures

    def test_requires_float64(self):
        with default_dtype(np.float32):
            w = Tensor([1.0], requires_grad=True)
        with pytest.raises(ConfigError):
            grad_check(lambda: w.sum(), {"w": w})


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_training_mode_is_float32(m, n, seed):
    r = np.random.default_rng(seed)
    with default_dtype(np.float32):
        a, b = Tensor(r.normal(size=(m, 3))), Tensor(r.normal(size=(3, n)))
        out = softmax(matmul(a, b))
    assert out.dtype == np.float32
    assert np.all(np.isfinite(out.data))
