import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msconv import tensor as T
from msconv.complexity import count_flops, count_params
from msconv.networks import (
    ModelConfig,
    build_carn,
    build_network,
    build_srresnet,
    deepen_to_target,
    forward_sr,
    infer_padded,
    load_checkpoint,
    n_shared_diagonals,
    save_checkpoint,
    unfold_network,
)
from msconv.tensor import Tensor


def tiny(variant="baseline", backbone="srresnet", **kw):
    kw.setdefault("num_blocks", 2 if backbone == "srresnet" else 1)
    kw.setdefault("width", 8)
    kw.setdefault("head_kernel", 3)
    kw.setdefault("dtype", "float64")
    return build_network(ModelConfig(backbone=backbone, variant=variant, **kw))


def run(net, x):
    with T.no_grad():
        return forward_sr(net, Tensor(x)).data


class TestConfig:
    def test_defaults(self):
        assert ModelConfig().num_blocks == 16 and ModelConfig(backbone="carn").num_blocks == 3
        assert ModelConfig(variant="baseline", branches=4).branches == 1
        assert ModelConfig(variant="multigrid").branches == 3

    @pytest.mark.parametrize(
        "kw",
        [
            {"backbone": "vgg"},
            {"variant": "unet"},
            {"upscale": 3},
            {"width": 10},
            {"head_kernel": 4},
            {"num_blocks": -1},
            {"dtype": "float16"},
            {"variant": "ms2", "branches": 1},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_dict_round_trip(self):
        cfg = ModelConfig(variant="ms3", num_blocks=5, width=32)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"depth": 3})

    def test_builder_backbone_check(self):
        with pytest.raises(ValueError):
            build_carn(ModelConfig())
        with pytest.raises(ValueError):
            build_srresnet(ModelConfig(backbone="carn"))


class TestForward:
    @pytest.mark.parametrize("variant", ["baseline", "ms", "ms2", "ms2_no_lh", "ms3", "ms3_large", "octave", "multigrid"])
    def test_shape_law(self, rng, variant):
        net = tiny(variant)
        m = net.multiple
        y = run(net, rng.standard_normal((1, 3, 2 * m, 3 * m)))
        assert y.shape == (1, 3, 8 * m, 12 * m) and np.isfinite(y).all()

    def test_24_to_96(self, rng):
        assert run(tiny("ms3"), rng.standard_normal((1, 3, 24, 24))).shape == (1, 3, 96, 96)

    @settings(max_examples=10, deadline=None)
    @given(h=st.integers(1, 5), w=st.integers(1, 5), up=st.sampled_from([1, 2, 4, 8]))
    def test_shape_law_property(self, h, w, up):
        net = tiny("ms2", upscale=up, num_blocks=1)
        y = run(net, np.zeros((1, 3, 2 * h, 2 * w)))
        assert y.shape == (1, 3, 2 * h * up, 2 * w * up)

    def test_zero_blocks(self, rng):
        y = run(tiny(num_blocks=0), rng.standard_normal((2, 3, 5, 7)))
        assert y.shape == (2, 3, 20, 28)

    def test_zero_tail(self, rng):
        net = tiny("ms2")
        for name, p in net.named_parameters():
            if name.startswith("tail"):
                p.weight[:] = 0
                p.bias[:] = 0
        assert not run(net, rng.standard_normal((1, 3, 8, 8))).any()

    def test_divisibility_error_mentions_padding(self):
        net = tiny("multigrid")
        with pytest.raises(ValueError, match=r"pad by \(1, 3\)"):
            run(net, np.zeros((1, 3, 7, 9)))

    def test_channel_error(self):
        with pytest.raises(ValueError):
            run(tiny(), np.zeros((1, 1, 4, 4)))

    def test_infer_padded(self, rng):
        net = tiny("ms2")
        lr = rng.random((3, 8, 8))
        np.testing.assert_array_equal(infer_padded(net, lr), run(net, lr[None])[0])
        assert infer_padded(net, rng.random((3, 7, 5))).shape == (3, 28, 20)

    def test_carn_one_group(self, rng):
        y = run(tiny("ms3", backbone="carn"), rng.standard_normal((1, 3, 6, 6)))
        assert y.shape == (1, 3, 24, 24) and np.isfinite(y).all()

    def test_dtype_follows_config(self, rng):
        net = tiny(dtype="float32")
        assert run(net, rng.standard_normal((1, 3, 4, 4))).dtype == np.float32


class TestStructure:
    @pytest.mark.parametrize("nb", [0, 1, 4])
    def test_shared_diagonals(self, nb):
        assert n_shared_diagonals(tiny("ms3", num_blocks=nb)) == 2 * nb + 1
        assert n_shared_diagonals(tiny("ms2", num_blocks=nb)) == 0

    def test_global_skip(self, rng):
        # with every body unit zeroed, the pre-upsampler features equal the head output
        net = tiny(num_blocks=1)
        for name, p in net.named_parameters():
            if name.startswith(("body", "mid")):
                p.weight[:] = 0
                p.bias[:] = 0
        ref = tiny(num_blocks=0)
        for (_, a), (_, b) in zip(
            [x for x in net.named_parameters() if not x[0].startswith(("body", "mid"))],
            [x for x in ref.named_parameters() if not x[0].startswith("mid")],
        ):
            b.weight[...] = a.weight
            b.bias[...] = a.bias
        for name, p in ref.named_parameters():
            if name.startswith("mid"):
                p.weight[:] = 0
                p.bias[:] = 0
        x = rng.standard_normal((1, 3, 4, 4))
        np.testing.assert_array_equal(run(net, x), run(ref, x))

    def test_unfold_network(self, rng):
        for backbone in ("srresnet", "carn"):
            net = tiny(backbone=backbone)
            x = rng.standard_normal((2, 3, 6, 5))
            np.testing.assert_allclose(run(unfold_network(net), x), run(net, x), atol=1e-10)

    def test_unfold_rejects_variants(self):
        with pytest.raises(ValueError):
            unfold_network(tiny("ms2"))

    def test_params_seeded(self):
        a, b = tiny("ms3", seed=3), tiny("ms3", seed=3)
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.weight, q.weight)


class TestDeepen:
    def test_unchanged_at_current(self):
        cfg = ModelConfig(variant="ms3", num_blocks=3, width=16)
        f = count_flops(build_network(cfg), (16, 16))
        assert deepen_to_target(cfg, f, (16, 16)).num_blocks == 3

    def test_monotone_and_maximal(self):
        cfg = ModelConfig(variant="ms3", num_blocks=1, width=16)
        fl = [count_flops(build_network(ModelConfig(variant="ms3", num_blocks=n, width=16)), (16, 16)) for n in range(8)]
        assert all(a < b for a, b in zip(fl, fl[1:]))
        target = (fl[5] + fl[6]) // 2
        assert deepen_to_target(cfg, target, (16, 16)).num_blocks == 5

    def test_errors(self):
        cfg = ModelConfig(variant="ms3", num_blocks=4, width=16)
        with pytest.raises(ValueError):
            deepen_to_target(cfg, 1, (16, 16))
        with pytest.raises(ValueError):
            deepen_to_target(cfg, 1e15, (16, 16), max_blocks=8)


class TestCheckpoint:
    @pytest.mark.parametrize("variant,backbone", [("baseline", "srresnet"), ("ms3", "srresnet"), ("ms3", "carn"), ("multigrid", "srresnet")])
    def test_bit_exact(self, tmp_path, rng, variant, backbone):
        net = tiny(variant, backbone, seed=11)
        path = tmp_path / "m.msck"
        save_checkpoint(path, net, {"note": "x"}, {"aux": np.arange(5.0).reshape(1, 1, 1, 5)})
        back, extra, rest = load_checkpoint(path)
        assert back.cfg == net.cfg and extra == {"note": "x"}
        np.testing.assert_array_equal(rest["aux"].ravel(), np.arange(5.0))
        assert count_params(back) == count_params(net)
        for (n1, p), (n2, q) in zip(net.named_parameters(), back.named_parameters()):
            assert n1 == n2
            assert p.weight.tobytes() == q.weight.tobytes() and p.bias.tobytes() == q.bias.tobytes()
        x = rng.standard_normal((1, 3, 4 * net.multiple, 4 * net.multiple))
        assert run(net, x).tobytes() == run(back, x).tobytes()

    def test_shared_aliasing_survives(self, tmp_path):
        net = tiny("ms3", seed=2)
        save_checkpoint(tmp_path / "m", net)
        back, _, _ = load_checkpoint(tmp_path / "m")
        assert n_shared_diagonals(back) == n_shared_diagonals(net)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x")
