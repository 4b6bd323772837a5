"""Run configuration, seed derivation and the end-to-end detection pipeline.

Everything random in a run is seeded from ``RunConfig.seed`` through
:func:`derive_seed`, so a config fully determines every output.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import attacks, data as data_mod, detector, models
from .adaptive import AdaptivePlan, noise_robustness_probe, train_adaptive
from .evaluation import auroc, build_eval_sets, roc_curve
from .kernel import theorem1_check


def derive_seed(root: int, *stage) -> int:
    """64-bit seed from ``sha256("root/stage/...")``."""
    key = "/".join([str(int(root))] + [str(s) for s in stage]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


# -- config --------------------------------------------------------------------

@dataclass
class DatasetSection:
    source: str = "synth"
    class_count: int = 10
    per_class: int = 200
    test_per_class: int = 100
    local_per_class: int = 100
    shape: list = field(default_factory=lambda: [3, 16, 16])
    noise_sigma: float = 0.1
    gain_jitter: float = 0.4
    shift_jitter: int = 2
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class AttackSection:
    trigger: dict = field(default_factory=lambda: {"builtin": "random-pixels(3)", "size": 4, "alpha": 1.0})
    target: int = 0
    poison_rate: float = 0.1
    mode: str = "dirty-label"
    source_class: int = 1
    trigger_count: int = 1
    infected_label_count: int = 1


@dataclass
class ModelSection:
    arch: dict = field(default_factory=lambda: copy.deepcopy(models.DEFAULT_ARCH))
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    shuffle: bool = True
    warmup_epochs: float = 1.0


@dataclass
class AdaptiveSection:
    weight: float = 1.0
    scales: list = field(default_factory=lambda: list(detector.DEFAULT_SCALES))
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9


@dataclass
class DetectorSection:
    scales: list = field(default_factory=lambda: list(detector.DEFAULT_SCALES))
    threshold: float = 0.5
    mode: str = "data-free"
    normalization: str = "as-printed"
    noise_magnitudes: list = field(default_factory=lambda: list(detector.DEFAULT_NOISE_MAGNITUDES))


@dataclass
class EvalSection:
    magnitude: float = 0.05
    membership: str = "all-poisoned"


@dataclass
class KernelSection:
    per_class: int = 100
    heldout_per_class: int = 30
    shift_jitter: int = 0
    fractions: list = field(default_factory=lambda: [0.0, 0.02, 0.1, 0.25, 0.5])
    scales: list = field(default_factory=lambda: list(range(1, 12)))
    gammas: list = field(default_factory=lambda: [0.1, 1.0, 10.0])


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    attack: AttackSection = field(default_factory=AttackSection)
    model: ModelSection = field(default_factory=ModelSection)
    adaptive: AdaptiveSection = field(default_factory=AdaptiveSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    eval: EvalSection = field(default_factory=EvalSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        doc = self.to_dict()
        doc.pop("out")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"attack.poison_rate": 0.05})``."""
        doc = self.to_dict()
        for path, value in changes.items():
            node = doc
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return RunConfig.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        errors = []
        sections = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            if key not in sections:
                errors.append(f"unknown key '{key}'")
                continue
            f = sections[key]
            sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
            if sub is not None and dataclasses.is_dataclass(sub):
                if not isinstance(value, dict):
                    errors.append(f"'{key}' must be a mapping")
                    continue
                known = {g.name for g in dataclasses.fields(sub)}
                bad = sorted(set(value) - known)
                errors += [f"unknown key '{key}.{b}'" for b in bad]
                kwargs[key] = sub(**{k: v for k, v in value.items() if k in known})
            else:
                kwargs[key] = value
        if errors:
            raise ConfigError(errors)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def validate(self):
        errors = []
        d, a, det = self.dataset, self.attack, self.detector
        if d.source not in ("synth", "idx"):
            errors.append("dataset.source must be 'synth' or 'idx'")
        if d.source == "idx":
            for k in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(d, k):
                    errors.append(f"dataset.{k} is required when dataset.source is 'idx'")
        if len(d.shape) != 3:
            errors.append("dataset.shape must be [channels, height, width]")
        if not 0 < a.poison_rate <= 0.5:
            errors.append("attack.poison_rate must lie in (0, 0.5]")
        if a.mode not in attacks.MODES:
            errors.append(f"attack.mode must be one of {attacks.MODES}")
        if not 0 <= a.target < d.class_count:
            errors.append("attack.target out of range")
        if a.trigger_count < 1 or a.infected_label_count < 1:
            errors.append("attack.trigger_count and attack.infected_label_count must be >= 1")
        if det.mode not in ("data-free", "data-limited", "noise-variant"):
            errors.append("detector.mode must be data-free, data-limited or noise-variant")
        if det.normalization not in ("as-printed", "z-score"):
            errors.append("detector.normalization must be as-printed or z-score")
        if self.eval.membership not in ("all-poisoned", "successful-only"):
            errors.append("eval.membership must be all-poisoned or successful-only")
        try:
            detector.scaling_set(det.scales)
        except ValueError as exc:
            errors.append(f"detector.scales: {exc}")
        if errors:
            raise ConfigError(errors)


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# -- pipeline stages -----------------------------------------------------------

@dataclass
class Datasets:
    train: data_mod.LabeledDataset
    test: data_mod.LabeledDataset
    local: data_mod.LabeledDataset


def make_datasets(cfg: RunConfig) -> Datasets:
    d = cfg.dataset
    if d.source == "idx":
        train = data_mod.load_idx(d.train_images, d.train_labels, d.class_count)
        test_all = data_mod.load_idx(d.test_images, d.test_labels, d.class_count)
        local, test = test_all.split(0.5, derive_seed(cfg.seed, "local-split"))
        return Datasets(train, test, local)

    def synth(per_class, stage):
        return data_mod.synth_dataset(d.class_count, per_class, d.shape, d.noise_sigma,
                                      derive_seed(cfg.seed, "data", stage), d.gain_jitter, d.shift_jitter)

    return Datasets(synth(d.per_class, "train"), synth(d.test_per_class, "test"),
                    synth(d.local_per_class, "local"))


_CORNERS = ("br", "tl", "tr", "bl")


def make_triggers(cfg: RunConfig) -> list[tuple[attacks.TriggerSpec, int]]:
    """Trigger/target pairs; several triggers get distinct seeds and corners."""
    a = cfg.attack
    shape = tuple(cfg.dataset.shape)
    count = max(a.trigger_count, a.infected_label_count)
    out = []
    for i in range(count):
        doc = dict(a.trigger)
        if count > 1:
            size = int(doc.get("size", 4))
            _, h, w = shape
            r = 1 if _CORNERS[i % 4] in ("tl", "tr") else h - size - 1
            c = 1 if _CORNERS[i % 4] in ("tl", "bl") else w - size - 1
            doc["placement"] = [r, c]
            if i and "random-pixels" in doc.get("builtin", ""):
                doc["builtin"] = f"random-pixels({derive_seed(cfg.seed, 'trigger', i) % 10_000})"
        target = (a.target + i) % cfg.dataset.class_count if a.infected_label_count > 1 else a.target
        out.append((attacks.trigger_from_dict(doc, shape), target))
    return out


def make_plan(cfg: RunConfig, triggers) -> attacks.PoisonPlan:
    a = cfg.attack
    sources = [a.source_class] * len(triggers) if a.mode == "source-specific" else []
    return attacks.PoisonPlan(triggers, a.poison_rate, a.mode, derive_seed(cfg.seed, "poison"), sources)


def train_config(cfg: RunConfig, stage: str) -> models.TrainConfig:
    m = cfg.model
    return models.TrainConfig(m.epochs, m.batch_size, m.learning_rate, m.momentum,
                              derive_seed(cfg.seed, "train", stage) % 2**63, m.shuffle, m.warmup_epochs)


def new_model(cfg: RunConfig, stage: str = "init") -> models.ConvNet:
    return models.ConvNet(cfg.dataset.shape, cfg.dataset.class_count, cfg.model.arch,
                          derive_seed(cfg.seed, "model", stage) % 2**63)


def poisoned_testsets(cfg: RunConfig, test, triggers) -> list[attacks.PoisonedTestSet]:
    """One triggered copy of the test set per trigger, skipping its target class
    (and, in source-specific mode, keeping only the source class)."""
    out = []
    for spec, target in triggers:
        keep = test.labels != target
        if cfg.attack.mode == "source-specific":
            keep &= test.labels == cfg.attack.source_class
        out.append(attacks.build_poisoned_testset(test.subset(np.flatnonzero(keep)), spec, target))
    return out


def merge_testsets(sets) -> attacks.PoisonedTestSet:
    if len(sets) == 1:
        return sets[0]
    return attacks.PoisonedTestSet(np.concatenate([s.images for s in sets]),
                                   np.concatenate([s.true_labels for s in sets]),
                                   sets[0].target, sets[0].class_count, sets[0].spec)


@dataclass
class TrainedRun:
    cfg: RunConfig
    datasets: Datasets
    triggers: list
    poisoned_train: data_mod.LabeledDataset
    flags: np.ndarray
    model: models.ConvNet
    result: models.TrainResult


def train_poisoned(cfg: RunConfig, datasets: Datasets | None = None) -> TrainedRun:
    datasets = datasets or make_datasets(cfg)
    triggers = make_triggers(cfg)
    poisoned, flags = attacks.build_poisoned_dataset(datasets.train, make_plan(cfg, triggers))
    result = models.train(new_model(cfg), poisoned, train_config(cfg, "poisoned"))
    return TrainedRun(cfg, datasets, triggers, poisoned, flags, result.model, result)


def train_benign(cfg: RunConfig, datasets: Datasets | None = None) -> models.TrainResult:
    datasets = datasets or make_datasets(cfg)
    return models.train(new_model(cfg), datasets.train, train_config(cfg, "poisoned"))


def run_adaptive(cfg: RunConfig, datasets: Datasets | None = None) -> models.TrainResult:
    datasets = datasets or make_datasets(cfg)
    triggers = make_triggers(cfg)
    ad = cfg.adaptive
    plan = AdaptivePlan(make_plan(cfg, triggers), tuple(ad.scales), ad.weight)
    tcfg = models.TrainConfig(ad.epochs, ad.batch_size, ad.learning_rate, ad.momentum,
                              derive_seed(cfg.seed, "train", "poisoned") % 2**63, cfg.model.shuffle,
                              cfg.model.warmup_epochs)
    return train_adaptive(new_model(cfg), datasets.train, plan, tcfg)


@dataclass
class Evaluation:
    auroc: dict
    asr: float
    clean_accuracy: float
    scores: dict  # mode -> (pos_scores, neg_scores)
    roc: dict

    def summary_rows(self):
        rows = [("clean_accuracy", self.clean_accuracy), ("asr", self.asr)]
        rows += [(f"auroc_{k}", v) for k, v in sorted(self.auroc.items())]
        return rows


def detector_scores(cfg: RunConfig, model, images, stats=None, mode=None, seed_stage="scores"):
    det = cfg.detector
    mode = mode or det.mode
    if mode == "data-free":
        return detector.spc(model, images, det.scales)
    if mode == "data-limited":
        return detector.nspc(model, images, det.scales, stats, det.normalization)
    if mode == "noise-variant":
        return detector.noise_variant_score(model, images, det.noise_magnitudes,
                                            derive_seed(cfg.seed, "noise-variant", seed_stage))
    raise ValueError(f"unknown detector mode {mode!r}")


def evaluate(cfg: RunConfig, model, datasets: Datasets, triggers, modes=("data-free", "data-limited")) -> Evaluation:
    """AUROC of each detector mode over the noise-augmented positive/negative sets."""
    ptest = merge_testsets(poisoned_testsets(cfg, datasets.test, triggers))
    sets = build_eval_sets(datasets.test, ptest, model, cfg.eval.magnitude, cfg.eval.membership,
                           derive_seed(cfg.seed, "eval-noise"))
    stats = None
    if "data-limited" in modes:
        stats = detector.fit_class_stats(model, datasets.local, cfg.detector.scales)
    scores, aucs, rocs = {}, {}, {}
    for mode in modes:
        pos = detector_scores(cfg, model, sets.positive, stats, mode, "pos")
        neg = detector_scores(cfg, model, sets.negative, stats, mode, "neg")
        scores[mode] = (pos, neg)
        aucs[mode] = auroc(pos, neg)
        rocs[mode] = roc_curve(pos, neg)
    asrs = [models.attack_success_rate(model, p) for p in poisoned_testsets(cfg, datasets.test, triggers)]
    return Evaluation(aucs, float(np.mean(asrs)), models.accuracy(model, datasets.test), scores, rocs)


def noise_probe(cfg: RunConfig, model, datasets: Datasets, triggers, magnitudes=(0.0, 0.1, 0.2, 0.3)):
    """ASR-under-noise curve on the run's triggered test images."""
    ptest = merge_testsets(poisoned_testsets(cfg, datasets.test, triggers))
    return noise_robustness_probe(model, ptest, magnitudes, derive_seed(cfg.seed, "probe") % 2**63)


def kernel_check_inputs(cfg: RunConfig):
    """Clean pool, held-out set, trigger, target and split seed used by the kernel check."""
    d, k = cfg.dataset, cfg.kernel

    def synth(per_class, stage):
        return data_mod.synth_dataset(d.class_count, per_class, d.shape, d.noise_sigma,
                                      derive_seed(cfg.seed, "kernel", stage), d.gain_jitter, k.shift_jitter)

    spec, target = make_triggers(cfg)[0]
    return (synth(k.per_class, "train"), synth(k.heldout_per_class, "heldout"), spec, target,
            derive_seed(cfg.seed, "kernel", "split"))


def kernel_check(cfg: RunConfig):
    """Kernel-regression corroboration rows on unshifted synthetic data."""
    clean, held_out, spec, target, seed = kernel_check_inputs(cfg)
    k = cfg.kernel
    return theorem1_check(clean, held_out, spec, target, k.fractions, k.scales, k.gammas, seed)


# -- sweeps --------------------------------------------------------------------

SWEEP_PARAMETERS = ("scaling_set_size", "local_samples_per_class", "poisoning_rate", "trigger_size",
                    "infected_label_count", "trigger_count")
SWEEP_SCALE_POOL = (3, 5, 7, 9, 11, 13)


def _sweep_point(cfg: RunConfig, parameter, value, cache):
    if parameter == "scaling_set_size":
        point = cfg.replace(**{"detector.scales": list(SWEEP_SCALE_POOL[:int(value)])})
    elif parameter == "local_samples_per_class":
        point = cfg.replace(**{"dataset.local_per_class": int(value)})
    elif parameter == "poisoning_rate":
        point = cfg.replace(**{"attack.poison_rate": float(value)})
    elif parameter == "trigger_size":
        trig = dict(cfg.attack.trigger, size=int(value))
        point = cfg.replace(**{"attack.trigger": trig})
    elif parameter == "infected_label_count":
        point = cfg.replace(**{"attack.infected_label_count": int(value)})
    else:
        point = cfg.replace(**{"attack.trigger_count": int(value)})
    # detector-only parameters reuse the trained model; the rest retrain with a point-specific seed
    if parameter in ("scaling_set_size", "local_samples_per_class"):
        if "run" not in cache:
            cache["run"] = train_poisoned(cfg)
        run = cache["run"]
        datasets = make_datasets(point) if parameter == "local_samples_per_class" else run.datasets
        datasets = Datasets(run.datasets.train, run.datasets.test, datasets.local)
        modes = ("data-free",) if parameter == "scaling_set_size" else ("data-free", "data-limited")
        return evaluate(point, run.model, datasets, run.triggers, modes)
    point = point.replace(seed=derive_seed(cfg.seed, "sweep", parameter, value) % 2**63)
    run = train_poisoned(point)
    return evaluate(point, run.model, run.datasets, run.triggers, ("data-free", "data-limited"))


def _sweep_row(cfg, parameter, value, cache):
    try:
        ev = _sweep_point(cfg, parameter, value, cache)
    except Exception as exc:
        raise RuntimeError(f"sweep {parameter}={value}: {exc}") from exc
    row = {"value": value, "auroc": ev.auroc["data-free"], "asr": ev.asr}
    if "data-limited" in ev.auroc:
        row["auroc_data_limited"] = ev.auroc["data-limited"]
    return row


def sweep(cfg: RunConfig, parameter: str, grid, workers: int = 1) -> list[dict]:
    """Re-run detection end to end at every grid value.

    Points are independent, so ``workers > 1`` fans them out to a process
    pool; rows always come back in grid order.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"unknown sweep parameter {parameter!r}")
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    cache = {}
    if workers <= 1:
        return [_sweep_row(cfg, parameter, v, cache) for v in grid]
    if parameter in ("scaling_set_size", "local_samples_per_class"):
        cache["run"] = train_poisoned(cfg)
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(workers) as pool:
        futures = [pool.submit(_sweep_row, cfg, parameter, v, cache) for v in grid]
        return [f.result() for f in futures]


def write_rows_csv(rows: list[dict], path):
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in keys])
