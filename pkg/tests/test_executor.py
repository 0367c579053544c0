import numpy as np
import pytest

from conftest import rand_tensor
from slimdet.executor import (
    ExecutionError, Tensor, WeightStore, batch_norm, conv2d, depthwise_conv2d,
    load_tensor, load_weights, relu, run, save_tensor, save_weights,
    softmax_channels,
)
from slimdet.graph import (
    BatchNormSpec, ConvSpec, Graph, LayerNode, PoolSpec, TensorShape,
    infer_shapes,
)
from slimdet.oracles import oracle_conv
from slimdet import zoo


class TestConv:
    def test_pointwise_identity(self):
        x = rand_tensor(TensorShape(1, 3, 6, 6), seed=1)
        w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        out = conv2d(x, ConvSpec(3, 1, 1), {"weight": w})
        np.testing.assert_array_equal(out.data, x.data)

    def test_strided_dilated_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 11, 13)).astype(np.float32)
        spec = ConvSpec(5, 3, 3, 2, 2, 2, 1, True)
        w = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(5).astype(np.float32)
        got = conv2d(Tensor(x), spec, {"weight": w, "bias": b}).data
        want = oracle_conv(x, spec, w, b)
        assert got.shape == want.shape
        assert np.abs(got - want).max() < 1e-5

    def test_zero_input_broadcasts_bias(self, rng):
        spec = ConvSpec(4, 3, 3, 1, 1, 1, 1, True)
        w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        b = np.array([1.5, -2.0, 0.25, 3.0], dtype=np.float32)
        out = conv2d(Tensor(np.zeros((1, 2, 5, 5), np.float32)), spec,
                     {"weight": w, "bias": b})
        for o in range(4):
            assert np.all(out.data[0, o] == b[o])

    def test_weight_shape_mismatch(self, rng):
        spec = ConvSpec(4, 3, 3)
        w = rng.standard_normal((4, 2, 5, 5)).astype(np.float32)
        with pytest.raises(ExecutionError, match="weight shape"):
            conv2d(Tensor(np.zeros((1, 2, 8, 8), np.float32)), spec, {"weight": w})

    def test_grouped_matches_oracle(self, rng):
        spec = ConvSpec(6, 3, 3, 1, 1, 1, groups=3)
        x = rng.standard_normal((1, 6, 7, 7)).astype(np.float32)
        w = rng.standard_normal((6, 2, 3, 3)).astype(np.float32)
        got = conv2d(Tensor(x), spec, {"weight": w}).data
        assert np.abs(got - oracle_conv(x, spec, w)).max() < 1e-5


class TestDepthwise:
    def test_identity_taps(self):
        x = rand_tensor(TensorShape(1, 2, 6, 6), seed=2)
        w = np.zeros((2, 1, 3, 3), np.float32)
        w[:, 0, 1, 1] = 1.0
        out = depthwise_conv2d(x, ConvSpec(2, 3, 3, 1, 1, 1, groups=2), {"weight": w})
        np.testing.assert_array_equal(out.data, x.data)

    def test_equals_grouped_conv(self, rng):
        c = 5
        x = rng.standard_normal((1, c, 8, 9)).astype(np.float32)
        w = rng.standard_normal((c, 1, 3, 3)).astype(np.float32)
        spec = ConvSpec(c, 3, 3, 2, 1, 1, groups=c)
        a = depthwise_conv2d(Tensor(x), spec, {"weight": w}).data
        b = conv2d(Tensor(x), spec, {"weight": w}).data
        np.testing.assert_array_equal(a, b)

    def test_single_channel_is_plain_conv(self, rng):
        x = rng.standard_normal((1, 1, 6, 6)).astype(np.float32)
        w = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
        a = depthwise_conv2d(Tensor(x), ConvSpec(1, 3, 3, 1, 1, 1, groups=1), {"weight": w}).data
        b = conv2d(Tensor(x), ConvSpec(1, 3, 3, 1, 1), {"weight": w}).data
        np.testing.assert_array_equal(a, b)


class TestBatchNorm:
    def identity_params(self, c):
        return {"gamma": np.ones(c, np.float32), "beta": np.zeros(c, np.float32),
                "mean": np.zeros(c, np.float32), "variance": np.ones(c, np.float32)}

    def test_identity(self):
        x = rand_tensor(TensorShape(2, 3, 4, 4), seed=3)
        out = batch_norm(x, self.identity_params(3), epsilon=0.0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_scalar_case(self):
        x = Tensor(np.full((1, 1, 1, 1), 4.0, np.float32))
        params = {"gamma": np.array([3.0], np.float32), "beta": np.array([1.0], np.float32),
                  "mean": np.array([2.0], np.float32), "variance": np.array([4.0], np.float32)}
        out = batch_norm(x, params, epsilon=0.0)
        assert out.data.item() == pytest.approx(4.0)

    def test_matches_elementwise_oracle(self, rng):
        c = 6
        x = rng.standard_normal((2, c, 5, 5)).astype(np.float32)
        params = {"gamma": rng.standard_normal(c).astype(np.float32),
                  "beta": rng.standard_normal(c).astype(np.float32),
                  "mean": rng.standard_normal(c).astype(np.float32),
                  "variance": rng.uniform(0.5, 2, c).astype(np.float32)}
        eps = 1e-4
        got = batch_norm(Tensor(x), params, eps).data
        want = np.empty_like(x)
        for n in range(2):
            for ch in range(c):
                for i in range(5):
                    for j in range(5):
                        want[n, ch, i, j] = (params["gamma"][ch]
                                             * (x[n, ch, i, j] - params["mean"][ch])
                                             / np.sqrt(params["variance"][ch] + eps)
                                             + params["beta"][ch])
        assert np.abs(got - want).max() < 1e-6

    def test_nonpositive_variance(self):
        x = Tensor(np.zeros((1, 1, 2, 2), np.float32))
        params = self.identity_params(1)
        params["variance"] = np.array([-1.0], np.float32)
        with pytest.raises(ExecutionError):
            batch_norm(x, params, epsilon=0.0)


class TestPooling:
    def test_avg_pool_constant_input(self):
        g = Graph((LayerNode("p", "avg_pool", ("input",), PoolSpec(3, 1, 1)),),
                  TensorShape(1, 2, 6, 6), ("p",))
        x = Tensor(np.full((1, 2, 6, 6), 3.25, np.float32))
        out = run(g, WeightStore(), x)["p"]
        # pad-excluded averaging keeps the constant even on borders
        np.testing.assert_allclose(out.data, 3.25, rtol=0, atol=1e-6)

    def test_max_pool_small_case(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        g = Graph((LayerNode("p", "max_pool", ("input",), PoolSpec(2, 2, 0)),),
                  TensorShape(1, 1, 4, 4), ("p",))
        out = run(g, WeightStore(), Tensor(x))["p"].data
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    def test_avg_pool_brute_force(self, rng):
        x = rng.standard_normal((1, 1, 5, 5)).astype(np.float32)
        g = Graph((LayerNode("p", "avg_pool", ("input",), PoolSpec(3, 2, 1)),),
                  TensorShape(1, 1, 5, 5), ("p",))
        out = run(g, WeightStore(), Tensor(x))["p"].data[0, 0]
        for oy in range(out.shape[0]):
            for ox in range(out.shape[1]):
                vals = [x[0, 0, y, xx]
                        for y in range(oy * 2 - 1, oy * 2 + 2)
                        for xx in range(ox * 2 - 1, ox * 2 + 2)
                        if 0 <= y < 5 and 0 <= xx < 5]
                assert out[oy, ox] == pytest.approx(np.mean(vals), abs=1e-6)


class TestRun:
    def test_input_passthrough(self):
        g = Graph((), TensorShape(1, 2, 3, 3), ("input",))
        x = rand_tensor(TensorShape(1, 2, 3, 3), seed=4)
        out = run(g, WeightStore(), x)
        np.testing.assert_array_equal(out["input"].data, x.data)

    def test_model_outputs_finite_with_predicted_shapes(self):
        shape = TensorShape(1, 3, 64, 80)
        g, w = zoo.build("ssdr_1.5", shape, seed=7)
        x = rand_tensor(shape, seed=8)
        outs = run(g, w, x, return_all=True)
        shapes = infer_shapes(g)
        for nid, s in shapes.items():
            assert outs[nid].shape == s
            assert np.isfinite(outs[nid].data).all()

    def test_chain_equals_hand_composition(self, rng):
        shape = TensorShape(1, 3, 8, 8)
        g = Graph((
            LayerNode("c", "conv", ("input",), ConvSpec(4, 3, 3, 1, 1)),
            LayerNode("n", "batch_norm", ("c",), BatchNormSpec(1e-5)),
            LayerNode("r", "relu", ("n",)),
        ), shape, ("r",))
        w = WeightStore()
        w.set("c", "weight", rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        for name, val in (("gamma", rng.uniform(0.5, 1.5, 4)), ("beta", rng.standard_normal(4)),
                          ("mean", rng.standard_normal(4)), ("variance", rng.uniform(0.5, 2, 4))):
            w.set("n", name, val.astype(np.float32))
        x = rand_tensor(shape, seed=9)
        got = run(g, w, x)["r"].data
        want = relu(batch_norm(conv2d(x, g.node("c").spec, w.layer("c")),
                               w.layer("n"), 1e-5)).data
        np.testing.assert_array_equal(got, want)


    def test_deterministic(self):
        shape = TensorShape(1, 3, 32, 40)
        g, w = zoo.build("ssdr_0.47", shape, seed=5)
        x = rand_tensor(shape, seed=6)
        a = run(g, w, x)
        b = run(g, w, x)
        for k in a:
            assert np.array_equal(a[k].data, b[k].data)

    def test_missing_weights_names_layer(self):
        g = Graph((LayerNode("c", "conv", ("input",), ConvSpec(4, 3, 3, 1, 1)),),
                  TensorShape(1, 3, 8, 8), ("c",))
        with pytest.raises(ExecutionError, match="c"):
            run(g, WeightStore(), rand_tensor(TensorShape(1, 3, 8, 8)))

    def test_input_shape_checked(self):
        g = Graph((), TensorShape(1, 2, 3, 3), ("input",))
        with pytest.raises(ExecutionError, match="input shape"):
            run(g, WeightStore(), rand_tensor(TensorShape(1, 2, 4, 4)))

    def test_dilation_equals_zero_stuffed_kernel(self, rng):
        x = rng.standard_normal((1, 2, 12, 12)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        d = 2
        stuffed = np.zeros((3, 2, 5, 5), np.float32)
        stuffed[:, :, ::d, ::d] = w
        a = conv2d(Tensor(x), ConvSpec(3, 3, 3, 1, 2, d), {"weight": w}).data
        b = conv2d(Tensor(x), ConvSpec(3, 5, 5, 1, 2, 1), {"weight": stuffed}).data
        assert np.abs(a - b).max() < 1e-6

    def test_softmax_normalizes(self, rng):
        x = Tensor(rng.standard_normal((1, 5, 3, 3)).astype(np.float32))
        out = softmax_channels(x).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert (out >= 0).all()


class TestFileFormats:
    def test_tensor_round_trip(self, tmp_path, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
        p = tmp_path / "x.tnsr"
        save_tensor(p, x)
        np.testing.assert_array_equal(load_tensor(p).data, x.data)

    def test_tensor_magic(self, tmp_path):
        p = tmp_path / "bad.tnsr"
        p.write_bytes(b"JUNKxxxx")
        with pytest.raises(ExecutionError, match="magic"):
            load_tensor(p)

    def test_weights_round_trip(self, tmp_path):
        shape = TensorShape(1, 3, 16, 20)
        _, w = zoo.build("ssdr_0.47", shape, seed=11)
        p = tmp_path / "w.wstr"
        save_weights(p, w)
        w2 = load_weights(p)
        assert set(w2.entries) == set(w.entries)
        for layer, tensors in w.entries.items():
            for name, arr in tensors.items():
                np.testing.assert_array_equal(w2.get(layer, name), arr)

    def test_weights_truncated(self, tmp_path):
        shape = TensorShape(1, 3, 16, 20)
        _, w = zoo.build("ssdr_0.47", shape, seed=11)
        p = tmp_path / "w.wstr"
        save_weights(p, w)
        (tmp_path / "t.wstr").write_bytes(p.read_bytes()[:100])
        with pytest.raises(ExecutionError, match="truncated|corrupt"):
            load_weights(tmp_path / "t.wstr")

    def test_weight_files_are_deterministic(self, tmp_path):
        shape = TensorShape(1, 3, 16, 20)
        _, w = zoo.build("ssdr_0.47", shape, seed=11)
        save_weights(tmp_path / "a.wstr", w)
        save_weights(tmp_path / "b.wstr", w)
        assert (tmp_path / "a.wstr").read_bytes() == (tmp_path / "b.wstr").read_bytes()
