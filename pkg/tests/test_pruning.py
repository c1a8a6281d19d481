import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import masked_channels, masked_elements
from prunerobust.pruning import (
    BIAS,
    CONV,
    DENSE,
    ELEMENT,
    FILTER,
    GradualPruner,
    MaskMonotonicityError,
    MaskShapeError,
    NotAPruningEpoch,
    ParameterTensor,
    SparsitySchedule,
    apply_masks,
    filter_norms,
    prune_structured,
    prune_unstructured,
    schedule_sparsity,
    sync_bias_masks,
)


def row(values, mask=None):
    v = np.asarray(values, dtype=np.float64).reshape(1, -1)
    m = None if mask is None else np.asarray(mask).reshape(1, -1)
    return ParameterTensor("w", v, DENSE, mask=m)


class TestSchedule:
    sched = SparsitySchedule(0.0, 0.8, start_epoch=0, frequency=1, n_steps=10)

    def test_endpoints(self):
        assert schedule_sparsity(self.sched, 0) == 0.0
        assert schedule_sparsity(self.sched, 10) == 0.8

    def test_midpoint(self):
        assert abs(schedule_sparsity(self.sched, 5) - 0.7) < 1e-12

    def test_matches_cubic(self):
        for t in range(11):
            expected = 0.8 + (0.0 - 0.8) * (1 - t / 10) ** 3
            assert schedule_sparsity(self.sched, t) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("t", [-1, 11, 100])
    def test_outside_window(self, t):
        with pytest.raises(NotAPruningEpoch):
            schedule_sparsity(self.sched, t)

    def test_off_frequency(self):
        s = SparsitySchedule(0.1, 0.9, start_epoch=2, frequency=3, n_steps=4)
        assert s.pruning_epochs() == [2, 5, 8, 11, 14]
        with pytest.raises(NotAPruningEpoch):
            schedule_sparsity(s, 3)
        assert schedule_sparsity(s, 2) == 0.1
        assert schedule_sparsity(s, 14) == 0.9

    @given(
        si=st.floats(0, 0.9), ds=st.floats(0, 1), t0=st.integers(0, 5),
        dt=st.integers(1, 4), n=st.integers(1, 20),
    )
    def test_monotone_and_bounded(self, si, ds, t0, dt, n):
        sf = si + ds * (1 - si)
        s = SparsitySchedule(si, sf, t0, dt, n)
        vals = [schedule_sparsity(s, t) for t in s.pruning_epochs()]
        assert vals[0] == si and vals[-1] == sf
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert all(si <= v <= sf for v in vals)

    @pytest.mark.parametrize("kw", [
        dict(initial_sparsity=0.5, final_sparsity=0.3),
        dict(initial_sparsity=1.0, final_sparsity=1.0),
        dict(frequency=0), dict(n_steps=0), dict(start_epoch=-1),
        dict(granularity="block"),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SparsitySchedule(**kw)

    def test_check_fits(self):
        s = SparsitySchedule(0, 0.5, 1, 1, 35)
        s.check_fits(40)
        with pytest.raises(ValueError):
            s.check_fits(30)

    def test_over_window(self):
        s = SparsitySchedule.over_window(0.7, 1, 35, FILTER)
        assert (s.start_epoch, s.end_epoch, s.granularity) == (1, 35, FILTER)


class TestUnstructured:
    def test_fixture(self):
        t = row([0.1, -0.5, 0.3, -0.2])
        mask = prune_unstructured(t, 0.5)
        np.testing.assert_array_equal(mask.ravel(), [0, 1, 1, 0])
        np.testing.assert_array_equal(t.values.ravel(), [0, -0.5, 0.3, 0])

    def test_target_zero_is_noop(self):
        v = np.random.default_rng(0).normal(size=(3, 4))
        t = ParameterTensor("w", v.copy(), DENSE)
        prune_unstructured(t, 0.0)
        assert t.mask.all()
        np.testing.assert_array_equal(t.values, v)

    def test_target_one_masks_all(self):
        t = row(np.random.default_rng(1).normal(size=7))
        prune_unstructured(t, 1.0)
        assert not t.mask.any() and not t.values.any()

    def test_monotonicity_error(self):
        t = row(np.arange(1.0, 11.0))
        prune_unstructured(t, 0.5)
        with pytest.raises(MaskMonotonicityError):
            prune_unstructured(t, 0.3)

    def test_ties_lowest_index(self):
        t = row([1.0, 1.0, 1.0, 1.0])
        np.testing.assert_array_equal(prune_unstructured(t, 0.5).ravel(), [0, 0, 1, 1])

    def test_mask_only_grows_with_genuine_zeros(self):
        # a zero weight that is still live must not displace an already-masked one
        t = row([0.5, 0.0, 2.0, 3.0], mask=[1, 1, 0, 1])
        apply_masks([t])
        prune_unstructured(t, 0.5)
        assert t.mask[0, 2] == 0
        assert (t.mask == 0).sum() == 2

    @settings(max_examples=200)
    @given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=100),
           st.floats(0, 1))
    def test_oracle(self, values, target):
        v = np.array(values)
        t = row(v)
        prune_unstructured(t, target)
        got = set(np.flatnonzero(t.mask == 0))
        assert got == masked_elements(values, target)
        assert (t.mask == 0).sum() == math.floor(target * len(values) + 1e-9)


class TestStructured:
    def _conv(self, norms, k=2):
        w = np.zeros((len(norms), 1, k, k))
        for c, n in enumerate(norms):
            w[c] = n / (k * k)
        return ParameterTensor("conv.weight", w, CONV)

    def test_fixture(self):
        t = self._conv([2.0, 0.5, 1.0, 3.0])
        np.testing.assert_allclose(filter_norms(t), [2.0, 0.5, 1.0, 3.0])
        prune_structured(t, 0.5)
        np.testing.assert_array_equal(sorted(t.masked_channels()), [1, 2])
        assert not t.values[[1, 2]].any()

    def test_target_zero(self):
        t = self._conv([2.0, 0.5, 1.0, 3.0])
        prune_structured(t, 0.0)
        assert t.mask.all()

    def test_tie_break(self):
        t = self._conv([1.0, 1.0, 1.0, 1.0])
        prune_structured(t, 0.25)
        np.testing.assert_array_equal(t.masked_channels(), [0])

    def test_one_channel_survives(self):
        t = self._conv([1.0, 2.0])
        prune_structured(t, 0.99)
        assert len(t.masked_channels()) == 1

    def test_full_prune(self):
        t = self._conv([1.0, 2.0, 3.0])
        prune_structured(t, 1.0)
        assert len(t.masked_channels()) == 3

    def test_rejects_bias(self):
        b = ParameterTensor("conv.bias", np.ones(3), BIAS, paired_with="conv.weight")
        with pytest.raises(ValueError):
            prune_structured(b, 0.5)

    def test_dense(self):
        w = np.array([[3.0, 0.0], [0.1, 0.1], [1.0, 1.0]])
        t = ParameterTensor("fc.weight", w, DENSE)
        prune_structured(t, 0.34)
        np.testing.assert_array_equal(t.masked_channels(), [1])

    def test_bias_follows_channel(self):
        w = self._conv([2.0, 0.5, 1.0, 3.0])
        b = ParameterTensor("conv.bias", np.ones(4), BIAS, paired_with="conv.weight")
        prune_structured(w, 0.5)
        sync_bias_masks([w, b])
        np.testing.assert_array_equal(b.mask, [1, 0, 0, 1])
        np.testing.assert_array_equal(b.values, [1, 0, 0, 1])

    @settings(max_examples=200)
    @given(st.integers(1, 10), st.integers(1, 10), st.floats(0, 1), st.integers(0, 2**31))
    def test_oracle(self, n_out, n_in, target, seed):
        w = np.random.default_rng(seed).normal(size=(n_out, n_in))
        t = ParameterTensor("w", w.copy(), DENSE)
        prune_structured(t, target)
        assert set(t.masked_channels()) == masked_channels(w, target)


class TestApplyMasks:
    def test_definition(self):
        t = row([1.0, 2.0], mask=[1, 0])
        apply_masks([t])
        np.testing.assert_array_equal(t.values.ravel(), [1.0, 0.0])

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        t = row(rng.normal(size=10), mask=(rng.random(10) > 0.5).astype(np.uint8))
        apply_masks([t])
        once = t.values.copy()
        apply_masks([t])
        np.testing.assert_array_equal(t.values, once)

    def test_all_ones(self):
        t = row(np.arange(5.0))
        apply_masks([t])
        np.testing.assert_array_equal(t.values.ravel(), np.arange(5.0))

    def test_shape_mismatch(self):
        t = row(np.ones(4))
        t.mask = np.ones(3, dtype=np.uint8)
        with pytest.raises(MaskShapeError):
            apply_masks([t])


class TestParameterTensor:
    def test_mask_must_be_binary(self):
        with pytest.raises(ValueError):
            row(np.ones(2), mask=[1, 2])

    def test_sparsity(self):
        t = row(np.ones(4), mask=[1, 0, 0, 1])
        apply_masks([t])
        assert t.sparsity() == 0.5
        assert not t.values[0, 1]

    @pytest.mark.parametrize("kind,shape", [(CONV, (2, 3)), (DENSE, (4,)), (BIAS, (2, 2))])
    def test_rank_checked(self, kind, shape):
        with pytest.raises(MaskShapeError):
            ParameterTensor("w", np.ones(shape), kind)


class TestGradualPruner:
    def _tensors(self, seed=0):
        rng = np.random.default_rng(seed)
        return [
            ParameterTensor("conv1.weight", rng.normal(size=(10, 3, 3, 3)), CONV),
            ParameterTensor("conv1.bias", rng.normal(size=10), BIAS, paired_with="conv1.weight"),
            ParameterTensor("head.weight", rng.normal(size=(8, 10)), DENSE),
        ]

    @pytest.mark.parametrize("gran", [ELEMENT, FILTER])
    def test_masks_only_grow_and_hit_target(self, gran, tmp_path):
        ts = self._tensors()
        p = GradualPruner(SparsitySchedule.over_window(0.7, 1, 8, gran))
        prev = [t.mask.copy() for t in ts]
        rng = np.random.default_rng(1)
        for epoch in range(1, 11):
            p.step(ts, epoch)
            for t, m in zip(ts, prev):
                assert np.all(t.mask <= m)
            prev = [t.mask.copy() for t in ts]
            for t in ts:  # training keeps changing the live weights
                t.values += rng.normal(scale=0.1, size=t.shape) * t.mask
        conv = ts[0]
        if gran == FILTER:
            assert conv.channel_sparsity() == 0.7
            np.testing.assert_array_equal(np.flatnonzero(ts[1].mask == 0), conv.masked_channels())
        else:
            assert (conv.mask == 0).sum() == math.floor(0.7 * conv.size)
            assert ts[1].mask.all()
        path = tmp_path / "trace.csv"
        p.write_trace(path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert set(rows[0]) == {"epoch", "tensor", "target_sparsity", "observed_sparsity"}
        assert rows[-1]["epoch"] == "8"
        assert float(rows[-1]["target_sparsity"]) == 0.7

    def test_exclude(self):
        ts = self._tensors()
        p = GradualPruner(SparsitySchedule.over_window(0.5, 0, 1, FILTER), exclude=["head.weight"])
        p.step(ts, 1)
        assert ts[2].mask.all()
        assert ts[0].channel_sparsity() == 0.5

    def test_off_schedule_returns_none(self):
        p = GradualPruner(SparsitySchedule.over_window(0.5, 2, 4))
        assert p.step(self._tensors(), 1) is None
        assert p.trace == []
