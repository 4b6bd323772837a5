import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scaleup import attacks, data
from scaleup.attacks import PoisonPlan, TriggerSpec

SHAPE = (3, 16, 16)


@pytest.fixture(scope="module")
def clean():
    return data.synth_dataset(10, 100, SHAPE, 0.1, seed=4)


class TestApplyTrigger:
    def test_empty_mask_is_identity(self, rng):
        x = rng.random(SHAPE)
        spec = TriggerSpec(np.zeros(SHAPE), np.ones(SHAPE))
        assert np.array_equal(attacks.apply_trigger(x, spec), x)

    def test_white_patch(self, rng):
        x = rng.random(SHAPE) * 0.9
        spec = attacks.white_square(SHAPE, 4, (2, 3))
        y = attacks.apply_trigger(x, spec)
        assert np.all(y[:, 2:6, 3:7] == 1.0)
        outside = np.ones(SHAPE, bool)
        outside[:, 2:6, 3:7] = False
        assert np.array_equal(y[outside], x[outside])

    def test_blend(self):
        spec = TriggerSpec(np.ones(SHAPE), np.ones(SHAPE), alpha=0.2)
        y = attacks.apply_trigger(np.full(SHAPE, 0.5), spec)
        np.testing.assert_allclose(y, 0.6, rtol=0, atol=1e-15)

    def test_batch_and_shape_mismatch(self, rng):
        spec = attacks.white_square(SHAPE, 4)
        batch = rng.random((5,) + SHAPE)
        assert attacks.apply_trigger(batch, spec).shape == batch.shape
        with pytest.raises(ValueError):
            attacks.apply_trigger(rng.random((1, 16, 16)), spec)

    def test_alpha_bounds(self):
        with pytest.raises(ValueError):
            TriggerSpec(np.ones(SHAPE), np.ones(SHAPE), alpha=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_binary_trigger_idempotent(seed, size):
    x = np.random.default_rng(seed).random(SHAPE)
    spec = attacks.random_pixels(SHAPE, size, seed=seed)
    once = attacks.apply_trigger(x, spec)
    assert np.array_equal(attacks.apply_trigger(once, spec), once)


class TestBuiltins:
    def test_random_pixels_binary_pattern(self):
        spec = attacks.random_pixels(SHAPE, 4, seed=3)
        assert set(np.unique(spec.pattern[spec.mask > 0])) <= {0.0, 1.0}
        assert spec.mask.sum() == 3 * 16

    def test_default_placement_bottom_right(self):
        spec = attacks.white_square(SHAPE, 4)
        assert spec.placement == (11, 11)

    @pytest.mark.parametrize("doc", [
        {"builtin": "white-square", "size": 3, "alpha": 1.0, "placement": [1, 2]},
        {"builtin": "random-pixels(17)", "size": 5, "alpha": 0.5},
        {"builtin": "full-image(4)", "alpha": 0.1},
    ])
    def test_dict_round_trip(self, doc):
        spec = attacks.trigger_from_dict(doc, SHAPE)
        again = attacks.trigger_from_dict(spec.to_dict(), SHAPE)
        assert np.array_equal(spec.mask, again.mask) and np.array_equal(spec.pattern, again.pattern)
        assert spec.alpha == again.alpha

    def test_unknown_builtin(self):
        with pytest.raises(ValueError, match="unknown builtin"):
            attacks.trigger_from_dict({"builtin": "rainbow"}, SHAPE)


class TestPoisonedDataset:
    def test_zero_victims_is_an_error(self, clean):
        plan = PoisonPlan([(attacks.white_square(SHAPE), 0)], poison_rate=0.0009)
        with pytest.raises(ValueError, match="no victims"):
            attacks.build_poisoned_dataset(clean, plan)

    def test_dirty_label_counts(self, clean):
        plan = PoisonPlan([(attacks.white_square(SHAPE), 3)], 0.1, seed=1)
        ds, flags = attacks.build_poisoned_dataset(clean, plan)
        assert flags.sum() == 100
        assert np.all(ds.labels[flags] == 3)

    def test_unflagged_entries_untouched(self, clean):
        plan = PoisonPlan([(attacks.white_square(SHAPE), 3)], 0.2, seed=2)
        ds, flags = attacks.build_poisoned_dataset(clean, plan)
        assert ds.images[~flags].tobytes() == clean.images[~flags].tobytes()
        assert np.array_equal(ds.labels[~flags], clean.labels[~flags])

    def test_reproducible(self, clean):
        plan = PoisonPlan([(attacks.white_square(SHAPE), 3)], 0.1, seed=5)
        _, a = attacks.build_poisoned_dataset(clean, plan)
        _, b = attacks.build_poisoned_dataset(clean, plan)
        assert np.array_equal(a, b)

    def test_three_triggers_one_target(self, clean):
        specs = [attacks.white_square(SHAPE, 3, p) for p in [(0, 0), (0, 12), (12, 0)]]
        plan = PoisonPlan([(s, 1) for s in specs], 0.05, seed=0)
        ds, flags = attacks.build_poisoned_dataset(clean, plan)
        groups = ds.meta["trigger_group"]
        assert [np.sum(groups == i) for i in range(3)] == [50, 50, 50]
        assert flags.sum() == 150
        for i, spec in enumerate(specs):
            sel = groups == i
            assert np.array_equal(ds.images[sel], attacks.apply_trigger(clean.images[sel], spec))

    def test_clean_label_victims_from_target(self, clean):
        plan = PoisonPlan([(attacks.white_square(SHAPE), 6)], 0.05, mode="clean-label")
        ds, flags = attacks.build_poisoned_dataset(clean, plan)
        assert np.all(clean.labels[flags] == 6)

    def test_clean_label_pool_too_small(self, clean):
        plan = PoisonPlan([(attacks.white_square(SHAPE), 6)], 0.2, mode="clean-label")
        with pytest.raises(ValueError, match="eligible"):
            attacks.build_poisoned_dataset(clean, plan)

    def test_source_specific(self, clean):
        plan = PoisonPlan([(attacks.white_square(SHAPE), 0)], 0.1, mode="source-specific",
                          source_classes=[2])
        ds, flags = attacks.build_poisoned_dataset(clean, plan)
        src = flags & (clean.labels == 2)
        other = flags & (clean.labels != 2)
        assert src.sum() == 50 and other.sum() == 50
        assert np.all(ds.labels[src] == 0)
        assert np.array_equal(ds.labels[other], clean.labels[other])

    def test_source_specific_needs_sources(self):
        with pytest.raises(ValueError):
            PoisonPlan([(attacks.white_square(SHAPE), 0)], 0.1, mode="source-specific")


class TestPoisonedTestSet:
    def test_empty_mask_equals_clean(self, clean):
        spec = TriggerSpec(np.zeros(SHAPE), np.ones(SHAPE))
        pt = attacks.build_poisoned_testset(clean, spec, 0)
        assert np.array_equal(pt.images, clean.images)

    def test_patch_changes_sixteen_pixels_per_channel(self):
        x = np.full((1,) + SHAPE, 0.25)
        ds = data.LabeledDataset(x, [1], 10)
        pt = attacks.build_poisoned_testset(ds, attacks.white_square(SHAPE, 4), 0)
        diff = pt.images[0] != x[0]
        assert list(diff.sum(axis=(1, 2))) == [16, 16, 16]
        assert pt.target == 0 and list(pt.true_labels) == [1]

    def test_full_image_deviation_bounded(self, clean):
        spec = attacks.full_image(SHAPE, seed=2, alpha=0.1)
        pt = attacks.build_poisoned_testset(clean, spec, 0)
        assert np.max(np.abs(pt.images - clean.images)) <= 0.1 + 1e-12

    def test_non_target(self, clean):
        pt = attacks.build_poisoned_testset(clean, attacks.white_square(SHAPE), 0)
        assert np.all(pt.non_target().true_labels != 0)
