"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run directly with ``python tests/test_acceptance.py`` or as part of ``pytest``;
the per-criterion summary is printed at the end of the session.
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from scaleup import attacks, detector, kernel, models
from scaleup import experiment as ex
from scaleup.detector import DEFAULT_SCALES
from scaleup.evaluation import auroc
from scaleup.kernel import KernelClassifier

pytestmark = pytest.mark.slow


def record(n, title, ok, detail):
    ACCEPTANCE[n] = (title, bool(ok), detail)
    assert ok, detail


def test_01_attack_efficacy(poisoned_run, benign_model, poisoned_eval):
    test = poisoned_run.datasets.test
    acc, benign_acc = poisoned_eval.clean_accuracy, models.accuracy(benign_model, test)
    ok = poisoned_eval.asr >= 0.95 and abs(acc - benign_acc) <= 0.05 and poisoned_run.seconds <= 180
    record(1, "attack efficacy", ok,
           f"ASR {poisoned_eval.asr:.3f}, accuracy {acc:.3f} vs benign {benign_acc:.3f}, "
           f"{poisoned_run.seconds:.0f} s")


def test_02_data_free_detection(poisoned_eval):
    a = poisoned_eval.auroc["data-free"]
    record(2, "data-free detection", a >= 0.85, f"AUROC {a:.3f} (need >= 0.85)")


def test_03_data_limited_not_worse(poisoned_eval):
    free, limited = poisoned_eval.auroc["data-free"], poisoned_eval.auroc["data-limited"]
    record(3, "data-limited >= data-free", limited >= free - 0.02,
           f"NSPC AUROC {limited:.3f}, SPC AUROC {free:.3f}")


def test_04_benign_model_null(benign_eval):
    pos, neg = benign_eval.scores["data-free"]
    gap, a = abs(np.mean(pos) - np.mean(neg)), benign_eval.auroc["data-free"]
    record(4, "benign-model null", gap < 0.15 and 0.35 <= a <= 0.65,
           f"|mean gap| {gap:.3f}, AUROC {a:.3f}")


def double_loop_label(points, labels, class_count, gamma, query):
    """Kernel-regression label from explicit loops, shifted by the nearest distance for stability."""
    q = query.ravel().tolist()
    d2 = [sum((a - b) ** 2 for a, b in zip(p, q)) for p in points]
    nearest = min(d2)
    num = [0.0] * class_count
    for d, y in zip(d2, labels):
        num[y] += math.exp(-2.0 * gamma * (d - nearest))
    return max(range(class_count), key=lambda c: (num[c], -c))


def test_05_kernel_limit():
    cfg = ex.RunConfig()
    start = time.perf_counter()
    rows = ex.kernel_check(cfg)
    seconds = time.perf_counter() - start
    limit = [r for r in rows if r.fraction == 0.5]
    worst = min(r.target_rate for r in limit)
    full_grid = {(r.gamma, r.n) for r in limit} == {(g, float(n)) for g in (0.1, 1.0, 10.0) for n in range(1, 12)}

    clean, held_out, spec, target, seed = ex.kernel_check_inputs(cfg)
    mix = kernel.poison_mix(clean, spec, target, 0.5, np.random.default_rng(seed).permutation(len(clean)))
    points = [p.ravel().tolist() for p in mix.images]
    labels = mix.labels.tolist()
    queries = attacks.apply_trigger(held_out.images[::60], spec)
    agree = True
    for gamma in (0.1, 1.0, 10.0):
        kc = KernelClassifier(mix, gamma)
        for n in (1, 6, 11):
            scaled = detector.scale_image(queries, n)
            fast = kc.predict_labels(scaled)
            slow = [double_loop_label(points, labels, mix.class_count, gamma, q) for q in scaled]
            agree &= list(fast) == slow and all(label == target for label in slow)
    ok = full_grid and worst >= 0.99 and agree and seconds <= 60
    record(5, "kernel limit case", ok,
           f"min target rate {worst:.3f} over {len(limit)} (gamma, n) cells, "
           f"double-loop oracle {'agrees' if agree else 'disagrees'}, {seconds:.1f} s")


def pairwise_auroc(pos, neg):
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_06_auroc_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        p, n = rng.integers(1, 80, 2)
        grid = rng.integers(2, 12)  # coarse grids force ties
        pos, neg = rng.integers(0, grid, p) / (grid - 1), rng.integers(0, grid, n) / (grid - 1)
        worst = max(worst, abs(auroc(pos, neg) - pairwise_auroc(pos, neg)))
    record(6, "AUROC oracle equivalence", worst <= 1e-12, f"max deviation {worst:.1e} on 200 instances")


def layer_input_error(layer, x, rng, eps=1e-6):
    out = layer.forward(x)
    upstream = rng.standard_normal(out.shape)
    layer.forward(x)
    analytic = layer.backward(upstream)
    numeric = np.zeros_like(x)
    flat, nflat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = np.sum(layer.forward(x) * upstream)
        flat[i] = old - eps
        lo = np.sum(layer.forward(x) * upstream)
        flat[i] = old
        nflat[i] = (hi - lo) / (2 * eps)
    return np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric))


def test_07_gradients():
    worst_net, worst_layer = 0.0, {}
    makers = {
        "conv": lambda r: (models.Conv2D(2, 3, 3, r), (2, 2, 6, 6)),
        "maxpool": lambda r: (models.MaxPool2(), (2, 2, 6, 6)),
        "relu": lambda r: (models.ReLU(), (2, 2, 6, 6)),
        "flatten": lambda r: (models.Flatten(), (2, 2, 6, 6)),
        "dense": lambda r: (models.Dense(12, 4, r), (2, 12)),
    }
    for seed in range(20):
        model = models.ConvNet((2, 8, 8), 3, {"conv": [3], "dense": [5]}, seed=seed)
        rng = np.random.default_rng(seed)
        worst_net = max(worst_net, models.gradient_check(model, rng.random((4, 2, 8, 8)), rng.integers(0, 3, 4)))
        for name, make in makers.items():
            layer, shape = make(rng)
            err = layer_input_error(layer, rng.random(shape) - 0.3, rng)
            worst_layer[name] = max(worst_layer.get(name, 0.0), err)
    worst = max(worst_net, *worst_layer.values())
    record(7, "gradient correctness", worst < 1e-3,
           f"max relative error {worst:.1e} (network parameters {worst_net:.1e}; "
           + ", ".join(f"{k} {v:.1e}" for k, v in worst_layer.items()) + ")")


def test_08_adaptive_round_trip(default_cfg, poisoned_run, adaptive_model):
    run = poisoned_run
    a = ex.evaluate(default_cfg, adaptive_model, run.datasets, run.triggers, modes=("data-free",)).auroc["data-free"]
    adaptive = dict(ex.noise_probe(default_cfg, adaptive_model, run.datasets, run.triggers))
    vanilla = dict(ex.noise_probe(default_cfg, run.model, run.datasets, run.triggers))
    drop_a, drop_v = adaptive[0.0] - adaptive[0.3], vanilla[0.0] - vanilla[0.3]
    record(8, "adaptive attack round trip", a < 0.6 and drop_a >= 0.40 and drop_v < 0.10,
           f"adaptive AUROC {a:.3f}, ASR drop at 0.3: adaptive {drop_a:.3f}, vanilla {drop_v:.3f}")


def test_09_noise_variant_ablation():
    cfg = ex.RunConfig().replace(**{"attack.trigger": {"builtin": "full-image(4)", "alpha": 0.2}})
    run = ex.train_poisoned(cfg)
    ev = ex.evaluate(cfg, run.model, run.datasets, run.triggers, modes=("data-free", "noise-variant"))
    gap = ev.auroc["data-free"] - ev.auroc["noise-variant"]
    record(9, "noise-variant ablation", gap >= 0.1,
           f"scaling AUROC {ev.auroc['data-free']:.3f}, noise variant {ev.auroc['noise-variant']:.3f}, "
           f"ASR {ev.asr:.3f}")


def test_10_determinism(cli_eval_runs):
    (code_a, a, _), (code_b, b, _) = cli_eval_runs
    same = {name: (a / name).read_bytes() == (b / name).read_bytes()
            for name in ("roc.csv", "scores.csv", "summary.csv")}
    record(10, "determinism", code_a == code_b == 0 and all(same.values()),
           ", ".join(f"{k} {'identical' if v else 'differs'}" for k, v in same.items()))


def test_11_query_budget(poisoned_run):
    images = poisoned_run.datasets.test.images[:37]
    counter = models.CountingClassifier(poisoned_run.model)
    detector.spc(counter, images, DEFAULT_SCALES)
    per_sample = counter.queries / len(images)
    record(11, "query budget", per_sample == len(DEFAULT_SCALES) + 1,
           f"{per_sample:g} queries per sample with |S| = {len(DEFAULT_SCALES)}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
