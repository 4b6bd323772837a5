import math

import numpy as np
import pytest

from scaleup import attacks, data, experiment, kernel
from scaleup.data import LabeledDataset
from scaleup.kernel import KernelClassifier


def brute_force_probs(points, labels, k, gamma, query):
    """The kernel-regression formula evaluated with explicit loops."""
    num = [0.0] * k
    den = 0.0
    for x, y in zip(points, labels):
        d2 = sum((a - b) ** 2 for a, b in zip(x.ravel(), query.ravel()))
        w = math.exp(-2.0 * gamma * d2)
        num[y] += w
        den += w
    return np.array(num) / den


def test_single_point_is_one_hot(rng):
    kc = KernelClassifier(LabeledDataset(rng.random((1, 1, 8, 8)), [2], 4), gamma=1.0)
    p = kernel.kernel_predict_probs(kc, rng.random((1, 8, 8)))
    assert np.array_equal(p, [0, 0, 1, 0])


def test_equidistant_tie_goes_to_class_zero():
    pts = np.zeros((2, 1, 8, 8))
    pts[1] += 1.0
    kc = KernelClassifier(LabeledDataset(pts, [0, 1], 2), gamma=0.5)
    q = np.full((1, 1, 8, 8), 0.5)
    np.testing.assert_allclose(kc.predict_probs(q)[0], [0.5, 0.5], atol=1e-15)
    assert kc.predict_label(q[0]) == 0


@pytest.mark.parametrize("seed", range(5))
def test_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((40, 1, 4, 4))
    labels = rng.integers(0, 2, 40)
    gamma = [0.1, 0.5, 1.0, 2.0, 5.0][seed]
    kc = KernelClassifier(LabeledDataset(pts, labels, 2), gamma)
    for _ in range(5):
        q = rng.random((1, 4, 4))
        np.testing.assert_allclose(kc.predict_probs(q)[0], brute_force_probs(pts, labels, 2, gamma, q),
                                   rtol=0, atol=1e-12)


def test_partition_of_unity(rng):
    ds = data.synth_dataset(5, 10, (1, 8, 8), 0.2, seed=0)
    p = KernelClassifier(ds, 1.0).predict_probs(rng.random((30, 1, 8, 8)))
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)


def test_gamma_distance_scaling_invariance(rng):
    pts, labels = rng.random((12, 1, 4, 4)) * 0.5, rng.integers(0, 3, 12)
    q = rng.random((6, 1, 4, 4)) * 0.5
    c = 4.0
    a = KernelClassifier(LabeledDataset(pts, labels, 3), 1.0).predict_probs(q)
    b = KernelClassifier(LabeledDataset(pts / math.sqrt(c), labels, 3), c).predict_probs(q / math.sqrt(c))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_duplicate_point_equals_double_weight(rng):
    pts, labels = rng.random((3, 1, 4, 4)), np.array([0, 1, 1])
    dup = LabeledDataset(np.concatenate([pts, pts[:1]]), np.r_[labels, 0], 2)
    q = rng.random((5, 1, 4, 4))
    a = KernelClassifier(dup, 1.0).predict_probs(q)
    b = KernelClassifier(LabeledDataset(pts, labels, 2), 1.0, weights=[2, 1, 1]).predict_probs(q)
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_far_query_stays_finite(rng):
    kc = KernelClassifier(LabeledDataset(rng.random((4, 1, 4, 4)), [0, 1, 0, 1], 2), gamma=1e6)
    p = kc.predict_probs(np.full((1, 1, 4, 4), 1e3))
    assert np.all(np.isfinite(p))


def test_non_finite_query_raises(rng):
    kc = KernelClassifier(LabeledDataset(rng.random((2, 1, 4, 4)), [0, 1], 2), gamma=1.0)
    with pytest.raises(kernel.KernelWeightsVanished), np.errstate(invalid="ignore"):
        kc.predict_probs(np.full((1, 1, 4, 4), np.inf))


def test_gamma_must_be_positive(rng):
    with pytest.raises(ValueError):
        KernelClassifier(LabeledDataset(rng.random((2, 1, 4, 4)), [0, 1], 2), gamma=0.0)


@pytest.fixture(scope="module")
def rows():
    return experiment.kernel_check(experiment.RunConfig())


class TestScaledTriggerCheck:
    def test_limit_case_is_all_target(self, rows):
        assert min(r.target_rate for r in rows if r.fraction == 0.5) == 1.0

    def test_small_fraction_below_limit(self, rows):
        small = [r.target_rate for r in rows if r.fraction == 0.02 and r.n == 11]
        assert max(small) < 1.0

    def test_no_backdoor_near_prior(self, rows):
        # triggered held-out images of class 0 legitimately count as the target
        base = [r.target_rate for r in rows if r.fraction == 0.0 and r.n == 1]
        assert max(base) <= 0.2

    def test_fraction_sweep_reported(self, rows):
        report = kernel.monotonicity_report(rows)
        assert len(report) == 3 * 11

    def test_csv_columns(self, rows, tmp_path):
        kernel.write_theorem1_csv(rows, tmp_path / "t.csv")
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == "fraction,n,gamma,target_rate"

    def test_empty_heldout(self):
        clean = data.synth_dataset(2, 4, (1, 8, 8), 0.1, seed=0)
        with pytest.raises(ValueError):
            kernel.scaled_trigger_check(clean, clean.subset([]), attacks.white_square((1, 8, 8), 2), 0,
                                        [0.5], [1])
