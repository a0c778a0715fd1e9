import numpy as np
import pytest

import nextsession.tensor as T
from nextsession.session_encoder import KINDS, IseConfig, SessionEncoder

from helpers import finite_difference


def encoder(kind, dim=6, seed=0, **kw):
    return SessionEncoder(IseConfig(kind=kind, **kw), dim, np.random.default_rng(seed))


def rows(data):
    return T.Tensor(np.asarray(data, dtype=np.float32))


class TestPooling:
    def test_mean_singletons_are_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 6)).astype(np.float32)
        out = encoder("mean").encode_sessions(T.Tensor(x), [1, 1, 1, 1])
        np.testing.assert_array_equal(out.data, x)

    def test_max_example(self):
        out = encoder("max", dim=2).encode_sessions(rows([[1, 3], [3, 1]]), [2])
        np.testing.assert_allclose(out.data, [[3, 3]])

    def test_max_relu_rectifies_before_pooling(self):
        out = encoder("max_relu", dim=2).encode_sessions(
            rows([[-1, -3], [-2, -0.5]]), [2]
        )
        np.testing.assert_allclose(out.data, [[0, 0]])
        plain = encoder("max", dim=2).encode_sessions(
            rows([[-1, -3], [-2, -0.5]]), [2]
        )
        np.testing.assert_allclose(plain.data, [[-1, -0.5]])

    @pytest.mark.parametrize("kind", ["mean", "max", "max_relu"])
    def test_permutation_invariance(self, kind):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(9, 6)).astype(np.float32)
        lengths = [4, 2, 3]
        enc = encoder(kind)
        base = enc.encode_sessions(T.Tensor(x), lengths).data
        for _ in range(20):
            perm = np.concatenate([
                rng.permutation(4),
                4 + rng.permutation(2),
                6 + rng.permutation(3),
            ])
            shuffled = enc.encode_sessions(T.Tensor(x[perm]), lengths).data
            np.testing.assert_allclose(shuffled, base, atol=1e-6)

    def test_recurrent_is_order_sensitive(self):
        enc = encoder("recurrent", dim=4, seed=2)
        x = np.random.default_rng(1).normal(size=(3, 4)).astype(np.float32)
        fwd = enc.encode_sessions(T.Tensor(x), [3]).data
        rev = enc.encode_sessions(T.Tensor(x[::-1].copy()), [3]).data
        assert not np.allclose(fwd, rev)


class TestContracts:
    def test_empty_session_rejected(self):
        with pytest.raises(ValueError, match="empty session"):
            encoder("mean").encode_sessions(rows(np.zeros((2, 6))), [2, 0])

    def test_length_sum_must_match(self):
        with pytest.raises(ValueError, match="lengths sum"):
            encoder("mean").encode_sessions(rows(np.zeros((3, 6))), [2, 2])

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown session aggregator"):
            encoder("median")

    @pytest.mark.parametrize("kind", KINDS)
    def test_output_shape(self, kind):
        x = np.random.default_rng(0).normal(size=(7, 6)).astype(np.float32)
        out = encoder(kind).encode_sessions(T.Tensor(x), [3, 1, 3])
        assert out.shape == (3, 6)

    @pytest.mark.parametrize("kind", KINDS)
    def test_no_cross_session_flow(self, kind):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 6)).astype(np.float32)
        lengths = [3, 2, 3]
        enc = encoder(kind, seed=7)
        base = enc.encode_sessions(T.Tensor(x), lengths).data
        for target, (lo, hi) in enumerate([(0, 3), (3, 5), (5, 8)]):
            bumped = x.copy()
            bumped[lo:hi] += rng.normal(size=(hi - lo, 6)).astype(np.float32)
            out = enc.encode_sessions(T.Tensor(bumped), lengths).data
            for row in range(3):
                if row == target:
                    assert not np.allclose(out[row], base[row])
                else:
                    np.testing.assert_array_equal(out[row], base[row])


class TestGradients:
    @pytest.mark.parametrize("kind", ["recurrent", "attention"])
    def test_input_gradients_match_finite_difference(self, kind):
        enc = encoder(kind, dim=4, seed=9, layers=1, heads=2)
        params = enc.parameters()
        for p in params.values():
            p.data = p.data.astype(np.float64)
        x0 = np.random.default_rng(4).normal(size=(5, 4))
        w = np.random.default_rng(5).normal(size=(2, 4))

        x = T.Tensor(x0.copy(), requires_grad=True)
        loss = T.sum_all(T.mul(enc.encode_sessions(x, [3, 2]), T.Tensor(w)))
        loss.backward()

        def make_loss(arrays):
            xt = T.Tensor(arrays[0])
            return float(
                np.sum(enc.encode_sessions(xt, [3, 2]).data * w)
            )

        numeric = finite_difference(make_loss, [x0.copy()])
        err = np.max(np.abs(x.grad - numeric[0]) / np.maximum(1.0, np.abs(numeric[0])))
        assert err < 1e-4

    def test_recurrent_parameter_gradients(self):
        enc = encoder("recurrent", dim=3, seed=1)
        params = enc.parameters()
        names = sorted(params)
        for p in params.values():
            p.data = p.data.astype(np.float64)
        x0 = np.random.default_rng(2).normal(size=(4, 3))

        loss = T.sum_all(enc.encode_sessions(T.Tensor(x0), [2, 2]))
        loss.backward()

        def make_loss(arrays):
            for n, arr in zip(names, arrays):
                params[n].data = arr
            return float(np.sum(enc.encode_sessions(T.Tensor(x0), [2, 2]).data))

        numeric = finite_difference(make_loss, [params[n].data for n in names])
        for n, num in zip(names, numeric):
            g = params[n].grad
            if g is None:
                g = np.zeros_like(num)
            err = np.max(np.abs(g - num) / np.maximum(1.0, np.abs(num)))
            assert err < 1e-4, f"{n}: {err}"
