import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msconv import oracles as O
from msconv import tensor as T
from msconv.tensor import Parameter, Tensor
from msconv.unified import (
    CONV,
    CONV_UP,
    DOWN_CONV,
    IDENTITY,
    UP_CONV,
    ZERO,
    MSConvUnit,
    ScaleFeatures,
    TransformEntry,
    TransformSpec,
    aggregate_to_single,
    build_first_conv,
    build_last_conv,
    build_multibranch_ms3,
    build_variant,
    concat_groups,
    split_channels,
    split_to_scales,
    split_widths,
    unfold_standard,
)
from msconv.verify import random_features, unit_cases


def two_scale(rng, c=(3, 3), hw=8, n=1):
    return ScaleFeatures([Tensor(rng.standard_normal((n, c[0], hw, hw))), Tensor(rng.standard_normal((n, c[1], hw // 2, hw // 2)))])


def conv(x, p, k=None):
    k = p.kernel
    return T.conv2d(x, p, padding=(k - 1) // 2)


class TestScaleFeatures:
    def test_level_geometry_checked(self, rng):
        with pytest.raises(ValueError):
            ScaleFeatures([Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 8, 8)))])

    def test_batch_mismatch(self):
        with pytest.raises(ValueError):
            ScaleFeatures([Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((2, 1, 4, 4)))])


class TestForward:
    def test_identity_matrix(self, rng):
        spec = TransformSpec([[TransformEntry(IDENTITY), TransformEntry()], [TransformEntry(), TransformEntry(IDENTITY)]], (3, 3), (3, 3))
        x = two_scale(rng)
        y = MSConvUnit(spec)(x)
        for a, b in zip(x, y):
            np.testing.assert_array_equal(a.data, b.data)

    def test_single_scale_is_plain_conv(self, rng):
        unit = build_variant("standard", 1, (3,), (5,), rng=rng)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))
        p = unit.spec.entries[0][0].param
        np.testing.assert_array_equal(unit(ScaleFeatures([x]))[0].data, conv(x, p).data)

    def test_ms2_compositional_oracle(self, rng):
        unit = build_variant("ms2", 2, (3, 3), rng=rng)
        e = unit.spec.entries
        x = two_scale(rng)
        xh, xl = x
        y_h = conv(xh, e[0][0].param).data + T.nearest_upsample2(conv(xl, e[0][1].param)).data
        y_l = conv(T.avg_pool2(xh), e[1][0].param).data + conv(xl, e[1][1].param).data
        y = unit(x)
        np.testing.assert_allclose(y[0].data, y_h, atol=1e-12)
        np.testing.assert_allclose(y[1].data, y_l, atol=1e-12)

    def test_octave_orderings(self):
        unit = build_variant("octave", 2, (2, 2))
        e = unit.spec.entries
        assert e[0][1].kind == CONV_UP and e[1][0].kind == DOWN_CONV and e[1][0].down == "avg"

    def test_eq1_summation_all_variants(self, rng):
        for name, unit in unit_cases(rng):
            x = random_features(unit, rng)
            y = unit(x)
            for i, row in enumerate(unit.spec.entries):
                parts = [e(x[j]).data for j, e in enumerate(row) if e.kind != ZERO]
                ref = sum(parts) if parts else 0.0
                np.testing.assert_allclose(y[i].data, ref, atol=1e-12, err_msg=name)

    def test_channel_mismatch(self, rng):
        unit = build_variant("ms", 2, (4, 4))
        with pytest.raises(ValueError):
            unit(two_scale(rng, (3, 3)))

    def test_no_hl_low_branch_ignores_high(self, rng):
        unit = build_variant("ms2_no_hl", 2, (3, 3), rng=rng)
        x = two_scale(rng)
        x2 = ScaleFeatures([Tensor(rng.standard_normal(x[0].shape)), x[1]])
        np.testing.assert_array_equal(unit(x)[1].data, unit(x2)[1].data)
        zero = ScaleFeatures([x[0], Tensor(np.zeros(x[1].shape))])
        assert not unit(zero)[1].data.any()

    @settings(max_examples=10, deadline=None)
    @given(h=st.integers(1, 6), w=st.integers(1, 6), name=st.sampled_from(["octave", "ms2", "ms3", "ms3_large", "ms"]))
    def test_two_scale_shapes(self, h, w, name):
        unit = build_variant(name, 2, (2, 2))
        x = ScaleFeatures([Tensor(np.zeros((1, 2, 2 * h, 2 * w))), Tensor(np.zeros((1, 2, h, w)))])
        y = unit(x)
        assert y[0].shape[2:] == (2 * h, 2 * w) and y[1].shape[2:] == (h, w)


class TestBuildVariant:
    def test_unet_matrix(self):
        e = build_variant("unet", 2, (32, 32)).spec.entries
        assert [[x.kind for x in r] for r in e] == [[IDENTITY, ZERO], [ZERO, CONV]]
        assert e[1][1].kernel == 3

    def test_ms3_sharing_and_1x1(self):
        unit = build_variant("ms3", 2, (32, 32))
        e = unit.spec.entries
        assert e[0][0].param.share_id == e[1][1].param.share_id
        assert e[0][1].kernel == 1 and e[1][0].kernel == 1
        assert e[0][1].param.share_id != e[1][0].param.share_id

    def test_ms3_large_cross_kernels(self):
        e = build_variant("ms3_large", 2, (8, 8)).spec.entries
        assert e[0][1].kernel == 3 and e[1][0].kernel == 3

    def test_ms_param_count(self):
        unit = build_variant("ms", 2, (32, 32))
        assert sum(p.size() for p in T.unique_parameters(unit.parameters())) == 2 * (32 * 32 * 9 + 32) == 18_496

    def test_ms3_param_count(self):
        unit = build_variant("ms3", 2, (32, 32))
        assert sum(p.size() for p in T.unique_parameters(unit.parameters())) == 9_248 + 2 * 1_056

    def test_multigrid_structure(self):
        e = build_variant("multigrid", 3, (4, 4, 4)).spec.entries
        assert e[0][2].kind == ZERO and e[2][0].kind == ZERO
        assert e[0][1].kind == UP_CONV and e[1][0].kind == DOWN_CONV and e[1][0].down == "max"

    def test_ablation_zeros(self):
        assert build_variant("ms2_no_lh", 2, (2, 2)).spec.entries[0][1].kind == ZERO
        assert build_variant("ms2_no_hl", 2, (2, 2)).spec.entries[1][0].kind == ZERO

    @pytest.mark.parametrize("name,s", [("multigrid", 2), ("octave", 3), ("standard", 2), ("bogus", 2)])
    def test_unsupported(self, name, s):
        with pytest.raises(ValueError):
            build_variant(name, s, (2,) * s)

    def test_split_widths(self):
        assert split_widths(64, 2) == (32, 32)
        assert split_widths(64, 3) == (22, 21, 21)
        assert split_widths(64, 4) == (16, 16, 16, 16)


class TestMultibranch:
    def test_s1_single_conv(self):
        unit = build_multibranch_ms3(1, (4,))
        assert len(unit.spec.entries) == 1 and unit.spec.entries[0][0].kernel == 3

    def test_s2_matches_variant_structure(self):
        a = build_multibranch_ms3(2, (4, 4)).spec.entries
        b = build_variant("ms3", 2, (4, 4)).spec.entries
        for ra, rb in zip(a, b):
            for x, y in zip(ra, rb):
                assert (x.kind, x.kernel, x.steps, x.down) == (y.kind, y.kernel, y.steps, y.down)

    def test_s3_corner_composition(self, rng):
        unit = build_multibranch_ms3(3, (2, 2, 2), rng=rng)
        e = unit.spec.entries[0][2]
        assert e.kind == CONV_UP and e.steps == 2 and e.kernel == 1
        x = Tensor(rng.standard_normal((1, 2, 2, 2)))
        ref = T.nearest_upsample2(T.nearest_upsample2(T.conv2d(x, e.param))).data
        np.testing.assert_array_equal(e(x).data, ref)

    def test_unequal_widths_share_leading_block(self):
        unit = build_multibranch_ms3(3, (22, 21, 21))
        d = [unit.spec.entries[i][i].param for i in range(3)]
        assert len({p.share_id for p in d}) == 1
        assert np.shares_memory(d[0].weight, d[1].weight)
        d[0].weight[:] = 0
        assert not d[2].weight.any()

    def test_range(self):
        with pytest.raises(ValueError):
            build_multibranch_ms3(5, (2,) * 5)


class TestUnfold:
    def test_no_split(self, rng):
        w = Parameter(rng.standard_normal((4, 4, 3, 3)), rng.standard_normal(4))
        e = unfold_standard(w, (4,)).spec.entries
        np.testing.assert_array_equal(e[0][0].param.weight, w.weight)

    @pytest.mark.parametrize("split", [(2, 2), (1, 1, 1, 1), (3, 1)])
    def test_identity(self, rng, split):
        w = Parameter(rng.standard_normal((4, 4, 3, 3)), rng.standard_normal(4))
        x = Tensor(rng.standard_normal((2, 4, 5, 7)))
        got = concat_groups(unfold_standard(w, split)(split_channels(x, split))).data
        np.testing.assert_allclose(got, T.conv2d(x, w, padding=1).data, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.data())
    def test_identity_random_partitions(self, data):
        ci = data.draw(st.integers(1, 6))
        co = data.draw(st.integers(1, 6))
        cuts_in = data.draw(st.sets(st.integers(1, ci - 1), max_size=ci - 1)) if ci > 1 else set()
        cuts_out = data.draw(st.sets(st.integers(1, co - 1), max_size=co - 1)) if co > 1 else set()
        part = lambda cuts, n: tuple(np.diff([0, *sorted(cuts), n]))
        rng = np.random.default_rng(data.draw(st.integers(0, 1000)))
        w = Parameter(rng.standard_normal((co, ci, 3, 3)), rng.standard_normal(co))
        x = Tensor(rng.standard_normal((1, ci, 4, 5)))
        si, so = part(cuts_in, ci), part(cuts_out, co)
        got = concat_groups(unfold_standard(w, si, so)(split_channels(x, si))).data
        np.testing.assert_allclose(got, T.conv2d(x, w, padding=1).data, atol=1e-12)

    def test_partition_mismatch(self, rng):
        with pytest.raises(ValueError):
            unfold_standard(Parameter(np.zeros((4, 4, 3, 3))), (2, 3))


class TestFirstLast:
    def test_s2_split_shapes(self, rng):
        first = build_first_conv(3, (4, 4), rng=rng)
        y = split_to_scales(first, Tensor(rng.standard_normal((1, 3, 8, 8))))
        assert y[0].shape[2:] == (8, 8) and y[1].shape[2:] == (4, 4)

    def test_s1_is_plain_conv(self, rng):
        first = build_first_conv(3, (4,), rng=rng)
        last = build_last_conv((4,), 3, rng=rng)
        x = Tensor(rng.standard_normal((1, 3, 6, 6)))
        mid = split_to_scales(first, x)
        np.testing.assert_array_equal(mid[0].data, conv(x, first.spec.entries[0][0].param).data)
        out = aggregate_to_single(last, mid)
        np.testing.assert_array_equal(out.data, conv(mid[0], last.spec.entries[0][0].param).data)

    def test_identity_initialised_round_trip(self, rng):
        first = build_first_conv(2, (2,), kernel=3, rng=rng)
        last = build_last_conv((2,), 2, kernel=3, rng=rng)
        for unit in (first, last):
            p = unit.spec.entries[0][0].param
            p.weight[:] = 0
            p.weight[[0, 1], [0, 1], 1, 1] = 1
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        np.testing.assert_array_equal(aggregate_to_single(last, split_to_scales(first, x)).data, x.data)

    def test_aggregate_orders(self, rng):
        x = two_scale(rng, (2, 2))
        up_first = build_last_conv((2, 2), 3, rng=np.random.default_rng(0))
        conv_first = build_last_conv((2, 2), 3, upsample_first=False, rng=np.random.default_rng(0))
        p = up_first.spec.entries[0][1].param
        np.testing.assert_allclose(
            aggregate_to_single(up_first, x).data,
            conv(x[0], up_first.spec.entries[0][0].param).data + conv(T.nearest_upsample2(x[1]), p).data,
            atol=1e-12,
        )
        np.testing.assert_allclose(
            aggregate_to_single(conv_first, x).data,
            conv(x[0], conv_first.spec.entries[0][0].param).data + T.nearest_upsample2(conv(x[1], conv_first.spec.entries[0][1].param)).data,
            atol=1e-12,
        )


class TestSharing:
    def test_diagonals_stay_identical_after_update(self, rng):
        from msconv.pipeline import AdamState, adam_step

        unit = build_variant("ms3", 2, (3, 3), rng=rng)
        st_ = AdamState()
        for _ in range(3):
            x = two_scale(rng)
            tape = T.Tape()
            with T.using_tape(tape):
                y = unit(x)
                T.backward(T.add(T.sum_all(y[0]), T.sum_all(y[1])), tape)
            adam_step(unit.parameters(), st_, 1e-2)
        e = unit.spec.entries
        assert np.array_equal(e[0][0].param.weight, e[1][1].param.weight)
        assert len(T.unique_parameters([e[0][0].param, e[1][1].param])) == 1

    def test_shared_signature_enforced(self, rng):
        a = Parameter.init(2, 2, 3, rng)
        b = Parameter.init(2, 2, 3, rng)
        spec = TransformSpec([[TransformEntry(CONV, a), TransformEntry()], [TransformEntry(), TransformEntry(CONV, b)]], (2, 2), (2, 2))
        with pytest.raises(ValueError):
            MSConvUnit(spec, shared=True)

    def test_unit_gradients(self, rng):
        for name, unit in unit_cases(rng):
            x = random_features(unit, rng, n=1, hw=8)
            fn = lambda unit=unit, x=x: unit(x)[0]
            assert O.gradcheck(fn, list(x), unit.parameters(), max_coords=10) < 1e-4, name


class TestSpecValidation:
    def test_entry_parameter_rules(self, rng):
        with pytest.raises(ValueError):
            TransformEntry(IDENTITY, Parameter.init(1, 1, 1, rng))
        with pytest.raises(ValueError):
            TransformEntry(CONV)
        with pytest.raises(ValueError):
            TransformEntry(CONV_UP, Parameter.init(1, 1, 1, rng), steps=0)

    def test_channel_closure(self, rng):
        with pytest.raises(ValueError):
            TransformSpec([[TransformEntry(CONV, Parameter.init(3, 2, 3, rng))]], (2,), (4,))
