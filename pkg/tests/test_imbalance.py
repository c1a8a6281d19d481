import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunerobust.evaluation import GroundTruthBox
from prunerobust.imbalance import (
    ClassBalancer,
    ClassStatistics,
    ClassWeightTable,
    LambdaTooAggressiveError,
    UndefinedFrequencyError,
    class_repeat_factors,
    effective_number,
    effective_number_weights,
    inverse_freq_weights,
    repeat_factors,
    sample_epoch,
    scale_weights,
)


def stats_from_counts(num_images, image_counts, instances_per_image=1):
    """Class c appears in the first image_counts[c] images."""
    image_classes = {i: frozenset(c for c, k in image_counts.items() if i < k)
                     for i in range(num_images)}
    inst = {c: k * instances_per_image for c, k in image_counts.items()}
    return ClassStatistics(num_images, image_classes, inst)


class TestStatistics:
    def test_from_annotations(self):
        anns = [GroundTruthBox(0, 0, (0, 0, 1, 1)), GroundTruthBox(0, 0, (1, 1, 2, 2)),
                GroundTruthBox(1, 1, (0, 0, 1, 1)), GroundTruthBox(9, 1, (0, 0, 1, 1))]
        s = ClassStatistics.from_annotations(anns, [0, 1, 2], class_ids=[0, 1, 2])
        assert s.frequency(0) == pytest.approx(1 / 3)
        assert s.instance_counts == {0: 2, 1: 1, 2: 0}
        assert s.total_instances() == 3
        assert s.absent_classes() == [2]
        assert s.image_classes[2] == frozenset()

    def test_csv_roundtrip(self, tmp_path):
        s = stats_from_counts(10, {0: 10, 1: 3})
        s.write_csv(tmp_path / "s.csv")
        rows = ClassStatistics.read_csv(tmp_path / "s.csv")
        assert [(r["class_id"], r["image_count"], r["f_c"], r["N_c"]) for r in rows] == \
            [(0, 10, 1.0, 10), (1, 3, 0.3, 3)]


class TestRepeatFactors:
    def test_at_threshold(self):
        s = stats_from_counts(100, {0: 1})
        assert class_repeat_factors(s, 0.01)[0] == 1.0

    def test_rare(self):
        s = stats_from_counts(10000, {0: 1})
        assert class_repeat_factors(s, 0.01)[0] == pytest.approx(10.0, abs=1e-12)

    def test_image_max(self):
        # class 0 in every image (r=1), class 1 in one of 10000 (r=10)
        s = stats_from_counts(10000, {0: 10000, 1: 1})
        r = repeat_factors(s, 0.01)
        assert r[0] == pytest.approx(10.0) and r[1] == 1.0

    def test_empty_image(self):
        s = ClassStatistics(2, {0: frozenset({0}), 1: frozenset()}, {0: 1})
        assert repeat_factors(s, 0.3)[1] == 1.0

    def test_zero_frequency(self):
        s = ClassStatistics(2, {0: frozenset({0}), 1: frozenset()}, {0: 1, 1: 0})
        with pytest.raises(UndefinedFrequencyError):
            class_repeat_factors(s, 0.3)

    @pytest.mark.parametrize("t", [0.0, -0.1, 1.5])
    def test_threshold_domain(self, t):
        with pytest.raises(ValueError):
            class_repeat_factors(stats_from_counts(4, {0: 1}), t)


class TestSampleEpoch:
    def test_ones(self):
        ids = sample_epoch({i: 1.0 for i in range(20)}, seed=3)
        assert sorted(ids) == list(range(20))

    def test_integer_factor(self):
        ids = sample_epoch({0: 2.0, 1: 1.0}, seed=0)
        assert Counter(ids) == {0: 2, 1: 1}

    def test_deterministic_and_shuffled(self):
        f = {i: 1.5 for i in range(50)}
        assert sample_epoch(f, 7) == sample_epoch(f, 7)
        assert sample_epoch(f, 7) != sample_epoch(f, 8)

    def test_rejects_below_one(self):
        with pytest.raises(ValueError):
            sample_epoch({0: 0.5}, 0)

    def test_monte_carlo_half(self):
        counts = [Counter(sample_epoch({0: 1.5}, seed))[0] for seed in range(10_000)]
        assert abs(np.mean(counts) - 1.5) < 0.02


class TestInverseFrequency:
    def test_capped_frequent(self):
        s = stats_from_counts(100, {0: 40})
        assert inverse_freq_weights(s, 0.1, capped=True)[0] == 1.0

    def test_uncapped_frequent(self):
        s = stats_from_counts(100, {0: 40})
        assert inverse_freq_weights(s, 0.1, capped=False)[0] == pytest.approx(0.5)

    @pytest.mark.parametrize("capped", [True, False])
    def test_at_threshold(self, capped):
        s = stats_from_counts(100, {0: 10})
        assert inverse_freq_weights(s, 0.1, capped)[0] == pytest.approx(1.0)

    def test_zero_frequency(self):
        s = stats_from_counts(10, {0: 0})
        with pytest.raises(UndefinedFrequencyError):
            inverse_freq_weights(s, 0.1)

    @given(st.dictionaries(st.integers(0, 7), st.integers(1, 200), min_size=1), st.floats(0.01, 1))
    def test_capped_equals_repeat_factor(self, counts, t):
        s = stats_from_counts(200, counts)
        w = inverse_freq_weights(s, t, capped=True)
        r = class_repeat_factors(s, t)
        assert all(w[c] == r[c] for c in counts)
        assert w.background == 1.0


class TestEffectiveNumber:
    @pytest.mark.parametrize("beta", [0.0, 0.5, 0.9, 0.999])
    def test_single_instance(self, beta):
        assert effective_number(1, beta) == pytest.approx(1.0, abs=1e-12)

    def test_two(self):
        assert effective_number(2, 0.9) == pytest.approx(1.9, abs=1e-12)

    def test_hundred(self):
        brute = sum(0.99 ** k for k in range(100))  # geometric series term by term
        assert effective_number(100, 0.99) == pytest.approx(brute, abs=1e-9)
        assert abs(effective_number(100, 0.99) - 63.397) < 1e-3

    def test_beta_domain(self):
        with pytest.raises(ValueError):
            effective_number(3, 1.0)

    def test_normalized_mean_one(self):
        s = stats_from_counts(100, {0: 100, 1: 10, 2: 2})
        w = effective_number_weights(s, 0.99)
        assert np.mean(list(w.weights.values())) == pytest.approx(1.0)
        assert w[2] > w[1] > w[0]

    def test_small_beta_limit(self):
        s = stats_from_counts(100, {0: 100, 1: 10, 2: 2})
        raw = [1.0 / effective_number(s.instance_counts[c], 1e-6) for c in (0, 1, 2)]
        np.testing.assert_allclose(raw, 1.0, atol=1e-4)
        w = effective_number_weights(s, 1e-6)
        np.testing.assert_allclose(list(w.weights.values()), 1.0, atol=1e-4)


class TestScaleWeights:
    table = ClassWeightTable({0: 3.0, 1: 1.0, 2: 0.5}, "inv")

    def test_identity(self):
        assert scale_weights(self.table, 1.0).weights == self.table.weights

    def test_half(self):
        assert scale_weights(self.table, 0.5)[0] == 2.0

    def test_fixed_point(self):
        ones = ClassWeightTable({0: 1.0, 1: 1.0}, "inv")
        assert scale_weights(ones, 3.7).weights == ones.weights

    def test_too_aggressive(self):
        with pytest.raises(LambdaTooAggressiveError):
            scale_weights(self.table, 2.0)  # 1 + 2 * (0.5 - 1) = 0

    def test_lambda_domain(self):
        with pytest.raises(ValueError):
            scale_weights(self.table, 0.0)


class TestArgminPreserved:
    @settings(max_examples=50)
    @given(st.lists(st.integers(1, 100), min_size=2, max_size=6, unique=True))
    def test_rarest_gets_largest_weight(self, image_counts):
        counts = dict(enumerate(image_counts))
        s = stats_from_counts(100, counts)
        rarest = min(counts, key=counts.get)
        t = 0.9
        tables = [inverse_freq_weights(s, t, True), inverse_freq_weights(s, t, False),
                  effective_number_weights(s, 0.99)]
        for table in tables:
            assert table[rarest] == max(table.weights.values())
            assert table.background == 1.0
        r = class_repeat_factors(s, t)
        assert r[rarest] == max(r.values())


class TestBalancer:
    s = stats_from_counts(100, {0: 100, 1: 10, 2: 2, 3: 0})

    def test_none(self):
        b = ClassBalancer("none").fit(self.s)
        assert b.class_weight_vector(4) is None and b.repeat_factors_ is None

    def test_excludes_absent(self):
        b = ClassBalancer("inv", t=0.3, lam=0.5).fit(self.s)
        assert b.excluded_ == (3,)
        v = b.class_weight_vector(4)
        assert v[3] == 1.0
        assert v[2] == pytest.approx(1 + 0.5 * (math.sqrt(0.3 / 0.02) - 1))

    def test_rfs(self):
        b = ClassBalancer("rfs", t=0.3).fit(self.s)
        assert b.repeat_factors_[0] == pytest.approx(math.sqrt(0.3 / 0.02))
        assert b.repeat_factors_[50] == 1.0

    def test_unknown(self):
        with pytest.raises(ValueError):
            ClassBalancer("focal").fit(self.s)

    def test_get_params(self):
        assert ClassBalancer("ens", beta=0.9).get_params() == \
            {"method": "ens", "t": 0.3, "beta": 0.9, "lam": 1.0}
