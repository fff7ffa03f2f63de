import numpy as np
import pytest

from statespan import autodiff as ad
from statespan.autodiff import (ParamStore, Tensor, adam_step, backward,
                                backward_tensor, finite_difference_check,
                                gru_cell, init_gru)


def make_gru_store(in_dim, hid_dim, seed=0, scale=0.5):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    init_gru(store, "g", in_dim, hid_dim, rng)
    if scale != ad.INIT_SCALE:
        for name in store.names():
            store[name].data = store[name].data * (scale / ad.INIT_SCALE)
    return store


def scalar_gru_oracle(x, h, store, prefix="g"):
    """Independent scalar-loop GRU evaluation for a single batch row."""
    def mv(vec, w):
        n_out = w.shape[1]
        out = np.zeros(n_out)
        for j in range(n_out):
            for i in range(len(vec)):
                out[j] += vec[i] * w[i, j]
        return out

    p = {n.split(".")[1]: store[n].data for n in store.names()}
    z = 1.0 / (1.0 + np.exp(-(mv(x, p["Wxz"]) + mv(h, p["Whz"]) + p["bz"])))
    r = 1.0 / (1.0 + np.exp(-(mv(x, p["Wxr"]) + mv(h, p["Whr"]) + p["br"])))
    n = np.tanh(mv(x, p["Wxn"]) + mv(r * h, p["Whn"]) + p["bn"])
    return z * h + (1.0 - z) * n


class TestGRUCell:
    def test_zero_everything_gives_zero(self):
        store = ParamStore()
        for name in ("Wxz", "Whz", "Wxr", "Whr", "Wxn", "Whn"):
            store.add(f"g.{name}", np.zeros((3, 3)))
        for name in ("bz", "br", "bn"):
            store.add(f"g.{name}", np.zeros(3))
        h = gru_cell(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))),
                     store, "g")
        assert np.all(h.data == 0.0)

    def test_saturated_update_gate_preserves_hidden(self):
        store = make_gru_store(3, 3, seed=1)
        store["g.bz"].data = np.full(3, 50.0)
        h_prev = np.array([[0.3, -0.2, 0.9]])
        h = gru_cell(Tensor(np.zeros((1, 3))), Tensor(h_prev), store, "g")
        assert np.allclose(h.data, h_prev, atol=1e-9)

    def test_matches_scalar_oracle(self):
        store = make_gru_store(3, 3, seed=7)
        rng = np.random.default_rng(7)
        x = rng.standard_normal(3)
        h = rng.standard_normal(3)
        got = gru_cell(Tensor(x[None]), Tensor(h[None]), store, "g").data[0]
        want = scalar_gru_oracle(x, h, store)
        assert np.max(np.abs(got - want)) < 1e-12


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(Tensor(np.array([0.0, 0.0]))).data
        assert np.allclose(out, [0.5, 0.5])

    def test_shift_invariance(self):
        for c in (-3.0, 0.0, 17.5):
            out = ad.softmax(Tensor(np.full(4, c))).data
            assert np.allclose(out, 0.25)

    def test_known_values(self):
        out = ad.softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data
        assert np.allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_empty_input_raises(self):
        with pytest.raises(ValueError):
            ad.softmax(Tensor(np.zeros(0)))

    def test_fully_masked_row_raises(self):
        with pytest.raises(ValueError):
            ad.softmax(Tensor(np.zeros((1, 3))),
                       mask=np.zeros((1, 3), dtype=bool))

    def test_mask_zeroes_positions(self):
        mask = np.array([[True, False, True]])
        out = ad.softmax(Tensor(np.array([[1.0, 100.0, 1.0]])), mask=mask).data
        assert out[0, 1] == 0.0
        assert np.allclose(out.sum(), 1.0)


class TestBackward:
    def test_linear_map_gradient(self):
        store = ParamStore()
        W = store.add("W", np.zeros((2, 3)))
        x = np.array([1.5, -2.0])
        loss = ad.tsum(ad.matmul(Tensor(x[None]), W))
        grads = backward(loss, store)
        assert np.allclose(grads["W"], np.tile(x[:, None], (1, 3)))

    def test_kl_of_softmax_matches_finite_differences(self):
        store = ParamStore()
        rng = np.random.default_rng(3)
        store.add("s", rng.standard_normal(5))
        q = np.array([0.1, 0.4, 0.2, 0.2, 0.1])

        def loss_fn():
            p = ad.softmax(store["s"])
            return ad.tsum(Tensor(q) * (np.log(q) - ad.log(p)))

        assert finite_difference_check(loss_fn, store, sample=5) < 1e-5

    def test_dead_branch_gradient_is_zero(self):
        store = ParamStore()
        store.add("used", np.ones(2))
        store.add("unused", np.ones(2))
        loss = ad.tsum(store["used"] * 3.0)
        grads = backward(loss, store)
        assert np.all(grads["unused"] == 0.0)

    def test_non_scalar_loss_raises(self):
        with pytest.raises(ValueError):
            backward_tensor(Tensor(np.zeros(3), requires_grad=True))

    def test_grad_accumulates_over_reuse(self):
        store = ParamStore()
        p = store.add("p", np.array(2.0))
        loss = p * p + p
        grads = backward(loss, store)
        assert np.allclose(grads["p"], 5.0)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        store = ParamStore()
        store.add("p", np.array([1.0, -2.0]))
        before = store["p"].data.copy()
        for _ in range(5):
            adam_step(store, {"p": np.zeros(2)}, lr=0.1)
        assert np.allclose(store["p"].data, before)

    def test_first_step_moves_by_lr(self):
        store = ParamStore()
        store.add("p", np.array(1.0))
        adam_step(store, {"p": np.array(1.0)}, lr=0.1)
        assert abs(store["p"].data - 0.9) < 1e-6

    def test_deterministic_trajectories(self):
        trajs = []
        for _ in range(2):
            store = ParamStore()
            store.add("p", np.array([0.5, -0.5]))
            rng = np.random.default_rng(11)
            hist = []
            for _ in range(10):
                adam_step(store, {"p": rng.standard_normal(2)}, lr=0.01)
                hist.append(store["p"].data.copy())
            trajs.append(np.array(hist))
        assert np.array_equal(trajs[0], trajs[1])

    def test_nonfinite_gradient_names_parameter(self):
        store = ParamStore()
        store.add("bad.weight", np.array(1.0))
        with pytest.raises(FloatingPointError, match="bad.weight"):
            adam_step(store, {"bad.weight": np.array(np.nan)}, lr=0.1)


class TestFiniteDifferenceCheck:
    def test_quadratic_is_nearly_exact(self):
        store = ParamStore()
        store.add("p", np.array([1.0, 2.0]))

        def loss_fn():
            p = store["p"]
            return ad.tsum(p * p)

        assert finite_difference_check(loss_fn, store) < 1e-8

    def test_zero_eps_raises(self):
        store = ParamStore()
        store.add("p", np.array([1.0]))
        with pytest.raises(ValueError):
            finite_difference_check(lambda: store["p"] * 0.0, store, eps=0.0)


class TestOps:
    def test_weighted_sum_matches_einsum(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((2, 4))
        m = rng.standard_normal((2, 4, 3))
        out = ad.weighted_sum(Tensor(w), Tensor(m)).data
        assert np.allclose(out, np.einsum("bl,bld->bd", w, m))

    def test_elementwise_grads_match_finite_differences(self):
        rng = np.random.default_rng(5)
        store = ParamStore()
        store.add("a", rng.uniform(0.5, 1.5, size=(3, 4)))
        store.add("b", rng.uniform(0.5, 1.5, size=(3, 4)))

        def loss_fn():
            a, b = store["a"], store["b"]
            mix = ad.tanh(a) * ad.sigmoid(b) + ad.exp(a * 0.1) / b
            return ad.tsum(ad.log(ad.clamp_min(mix, 1e-6)))

        assert finite_difference_check(loss_fn, store, sample=24) < 1e-6

    def test_gather_rows_scatters_gradient(self):
        store = ParamStore()
        store.add("emb", np.arange(12, dtype=float).reshape(4, 3))
        idx = np.array([1, 1, 3])
        loss = ad.tsum(ad.gather_rows(store["emb"], idx))
        grads = backward(loss, store)
        want = np.zeros((4, 3))
        want[1] = 2.0
        want[3] = 1.0
        assert np.allclose(grads["emb"], want)

    def test_concat_stack_reshape_roundtrip_grads(self):
        store = ParamStore()
        store.add("x", np.ones((2, 3)))

        def loss_fn():
            x = store["x"]
            c = ad.concat([x, x * 2.0], axis=1)
            s = ad.stack([c, c], axis=1)
            return ad.tsum(ad.reshape(s, (2, 12)) * 0.5)

        assert finite_difference_check(loss_fn, store, sample=6) < 1e-7

    def test_no_grad_skips_graph(self):
        store = ParamStore()
        p = store.add("p", np.array(1.0))
        with ad.no_grad():
            out = p * 2.0
        assert out.parents == () and not out.requires_grad
