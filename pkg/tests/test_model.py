import numpy as np
import pytest

import oracles
from ecrl.autograd import Tensor, grad_check, softmax
from ecrl.model import (
    ModelConfig,
    SelfRefineConfig,
    co_attention,
    co_attention_fuse,
    encode_query,
    encode_video,
    forward,
    grounding_head,
    init_params,
    pad_tokens,
    predict_topn,
    self_refine,
)


def _params(D=4, H=3, vocab=10, seed=0):
    return init_params(ModelConfig(D=D, H=H, vocab_size=vocab), seed)


class TestSelfRefine:
    def test_zero_iterations(self, rng):
        x = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(self_refine(x, SelfRefineConfig(iterations=0)).data, x)

    def test_constant_fixed_point(self):
        x = np.tile([0.3, -1.2, 2.0], (6, 1))
        np.testing.assert_allclose(self_refine(x).data, x, atol=1e-7)

    def test_loop_oracle(self, rng):
        x = rng.normal(size=(5, 3))
        out = self_refine(x, SelfRefineConfig(5.0, 1)).data
        np.testing.assert_allclose(out, oracles.self_refine(x, 5.0, 1), atol=1e-10)

    def test_unnormalized_flag(self, rng):
        x = rng.normal(size=(4, 3))
        out = self_refine(x, SelfRefineConfig(2.0, 2, row_normalize=False)).data
        np.testing.assert_allclose(out, oracles.self_refine(x, 2.0, 2, row_normalize=False), atol=1e-10)

    def test_convex_hull_when_cosines_nonnegative(self, rng):
        x = np.abs(rng.normal(size=(7, 4)))
        out = self_refine(x).data
        assert np.all(out >= x.min(axis=0) - 1e-12)
        assert np.all(out <= x.max(axis=0) + 1e-12)

    def test_batched_matches_single(self, rng):
        x = rng.normal(size=(2, 5, 3))
        out = self_refine(x).data
        np.testing.assert_allclose(out[1], self_refine(x[1]).data, atol=1e-14)


class TestEncoders:
    def test_video_shape_and_determinism(self, rng):
        p = _params()
        for T in (1, 2, 7):
            x = rng.normal(size=(T, 4))
            a, b = encode_video(Tensor(x), p).data, encode_video(Tensor(x), p).data
            assert a.shape == (T, 4)
            assert a.tobytes() == b.tobytes()

    def test_query_single_token(self):
        assert encode_query([3], _params()).data.shape == (1, 4)

    def test_query_determinism(self):
        p = _params()
        assert encode_query([1, 2, 3], p).data.tobytes() == encode_query([1, 2, 3], p).data.tobytes()

    def test_query_oov(self):
        with pytest.raises(IndexError):
            encode_query([99], _params())

    def test_padded_query_matches_unpadded(self):
        p = _params()
        ids, lengths = pad_tokens([(1, 2, 3, 4), (5, 6)])
        out = encode_query(ids, p, lengths).data
        np.testing.assert_allclose(out[1, :2], encode_query([5, 6], p).data, atol=1e-12)

    def test_video_grad_check(self, rng):
        p = init_params(ModelConfig(D=8, H=4, vocab_size=4), 1)
        keys = [k for k in p if k.startswith(("vattn", "vlstm", "vproj"))]
        x = Tensor(rng.normal(size=(6, 8)))
        w = Tensor(rng.normal(size=(6, 8)))
        report = grad_check(lambda: (encode_video(x, p) * w).sum(), {k: p[k] for k in keys})
        assert report.passed, report.failures

    def test_query_grad_check(self, rng):
        p = init_params(ModelConfig(D=8, H=4, vocab_size=6), 2)
        keys = [k for k in p if k.startswith(("emb", "qattn", "qlstm", "qproj"))]
        w = Tensor(rng.normal(size=(4, 8)))
        report = grad_check(lambda: (encode_query([0, 3, 5, 3], p) * w).sum(), {k: p[k] for k in keys})
        assert report.passed, report.failures


class TestCoAttention:
    def test_single_word(self, rng):
        p = _params()
        V, Q = rng.normal(size=(5, 4)), rng.normal(size=(1, 4))
        att = co_attention(Tensor(V), Tensor(Q), p)
        assert np.all(att["S_r"].data == 1.0)
        qw = Q @ p["fuse.ws"].data
        np.testing.assert_allclose(att["A"].data, np.repeat(qw, 5, axis=0), atol=1e-14)

    def test_word_permutation(self, rng):
        p = _params()
        V, Q = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
        perm = [2, 0, 1]
        a = co_attention(Tensor(V), Tensor(Q), p)
        b = co_attention(Tensor(V), Tensor(Q[perm]), p)
        np.testing.assert_allclose(b["S"].data, a["S"].data[:, perm], atol=1e-12)
        np.testing.assert_allclose(b["A"].data, a["A"].data, atol=1e-12)
        np.testing.assert_allclose(b["B"].data, a["B"].data, atol=1e-12)

    def test_normalisation(self, rng):
        att = co_attention(Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(3, 4))), _params())
        np.testing.assert_allclose(att["S_r"].data.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(att["S_c"].data.sum(axis=0), 1.0, atol=1e-9)

    def test_loop_oracle(self, rng):
        p = _params()
        V, Q = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
        att = co_attention(Tensor(V), Tensor(Q), p)
        ref = oracles.co_attention(V, Q, p["fuse.ws"].data)
        for key, r in zip(("S", "S_r", "S_c", "A", "B"), ref):
            np.testing.assert_allclose(att[key].data, r, atol=1e-10)
        fused = co_attention_fuse(Tensor(V), Tensor(Q), p).data
        np.testing.assert_allclose(fused, oracles.co_attention_fuse(V, Q, p), atol=1e-10)

    def test_query_mask_ignores_padding(self, rng):
        p = _params()
        V, Q = rng.normal(size=(1, 5, 4)), rng.normal(size=(1, 3, 4))
        Qp = np.concatenate([Q, rng.normal(size=(1, 2, 4))], axis=1)
        mask = np.array([[1, 1, 1, 0, 0]], bool)
        a = co_attention(Tensor(V), Tensor(Q), p)["A"].data
        b = co_attention(Tensor(V), Tensor(Qp), p, mask)["A"].data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestGroundingHead:
    def test_zero_weights(self, rng):
        p = _params()
        for k in p:
            if k.startswith(("start", "end")):
                p[k].data[...] = 0.0
        p["start.b"].data[...] = 0.7
        p["end.b"].data[...] = -0.2
        cs, ce = grounding_head(Tensor(rng.normal(size=(6, 4))), p)
        assert np.all(cs.data == 0.7) and np.all(ce.data == -0.2)

    def test_causal(self, rng):
        p = _params()
        x = rng.normal(size=(7, 4))
        y = x.copy()
        y[4:] += rng.normal(size=(3, 4))
        a, b = grounding_head(Tensor(x), p), grounding_head(Tensor(y), p)
        np.testing.assert_array_equal(a[0].data[:4], b[0].data[:4])
        np.testing.assert_array_equal(a[1].data[:4], b[1].data[:4])

    def test_grad_check(self, rng):
        p = init_params(ModelConfig(D=8, H=4, vocab_size=4), 3)
        keys = [k for k in p if k.startswith(("start", "end"))]
        x = Tensor(rng.normal(size=(6, 8)))
        w = rng.normal(size=(2, 6))

        def fn():
            cs, ce = grounding_head(x, p)
            return (cs * Tensor(w[0])).sum() + (ce * Tensor(w[1])).sum()

        assert grad_check(fn, {k: p[k] for k in keys}).passed

    def test_shared_parameters_between_streams(self, rng):
        # both streams go through one batched pass; each row must equal a solo run
        p = _params()
        before = {k: v.data.copy() for k, v in p.items()}
        x = rng.normal(size=(2, 5, 4))
        tokens = np.array([[1, 2], [1, 2]])
        _, cs, ce = forward(p, x, tokens)
        for i in range(2):
            _, cs1, ce1 = forward(p, x[i:i + 1], tokens[:1])
            np.testing.assert_allclose(cs.data[i], cs1.data[0], atol=1e-12)
            np.testing.assert_allclose(ce.data[i], ce1.data[0], atol=1e-12)
        assert all(np.array_equal(before[k], p[k].data) for k in p)


class TestPredictTopn:
    def test_forced_argmax(self):
        s = np.full(8, -1e9)
        e = np.full(8, -1e9)
        s[2], e[5] = 1.0, 1.0
        assert predict_topn(s, e, 1)[0][:2] == (2, 5)

    def test_tie_break(self):
        assert predict_topn(np.zeros(5), np.zeros(5), 1)[0][:2] == (0, 0)
        assert [x[:2] for x in predict_topn(np.zeros(3), np.zeros(3), 3)] == [(0, 0), (0, 1), (0, 2)]

    def test_brute_force(self, rng):
        for _ in range(50):
            s, e = rng.normal(size=7).round(1), rng.normal(size=7).round(1)
            got = predict_topn(s, e, 5)
            ref = oracles.topn(list(s), list(e), 5)
            assert [g[:2] for g in got] == [r[:2] for r in ref]
            confs = [g[2] for g in got]
            assert confs == sorted(confs, reverse=True)
            assert all(a <= b for a, b, _ in got)

    def test_bad_n(self):
        with pytest.raises(ValueError):
            predict_topn(np.zeros(3), np.zeros(3), 0)


def test_softmax_masked_rows_sum_to_one(rng):
    mask = np.array([True, False, True])
    p = softmax(Tensor(rng.normal(size=(4, 3))), axis=-1, mask=mask).data
    assert np.all(p[:, 1] == 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
