"""Command-line entry point: ``scaleup <command> [--config C] [--out DIR] [--seed N] [--mode M]``.

Every command writes its outputs under ``--out`` together with a manifest in
``manifests/<command>[-<model>].json`` recording the config hash of the stage, the
seeds, library versions and the sha256 of each input and output. Commands
that consume earlier artifacts check those manifests and refuse to run on
outputs produced under a different configuration.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, attacks, detector, experiment as ex, models
from .adaptive import AdaptivePlan, train_adaptive
from .data import LabeledDataset
from .evaluation import bench_overhead, confidence_curve
from .kernel import monotonicity_report, write_theorem1_csv

# Config sections each artifact depends on; the stage hash covers only these.
STAGES = {
    "synth": ("seed", "dataset"),
    "poison": ("seed", "dataset", "attack"),
    "train": ("seed", "dataset", "attack", "model"),
    "train-adaptive": ("seed", "dataset", "attack", "model", "adaptive"),
    "fit-stats": ("seed", "dataset", "attack", "model", "adaptive", "detector.scales"),
}
MODEL_TAGS = ("poisoned", "benign", "adaptive")


class CliError(Exception):
    """Failure reported as one JSON line on stderr."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# -- artifacts -----------------------------------------------------------------

def stage_hash(cfg: ex.RunConfig, stage: str) -> str:
    doc = cfg.to_dict()
    picked = {}
    for path in STAGES[stage]:
        node = doc
        for part in path.split("."):
            node = node[part]
        picked[path] = node
    return hashlib.sha256(json.dumps(picked, sort_keys=True).encode()).hexdigest()[:16]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Workspace:
    """An output directory plus the manifest bookkeeping for one command."""

    def __init__(self, root, cfg: ex.RunConfig, command: str):
        self.root = Path(root)
        self.cfg = cfg
        self.command = command
        self.name = command
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _producers(self):
        for m in sorted((self.root / "manifests").glob("*.json")):
            yield json.loads(m.read_text())

    def require(self, rel: str, stage: str) -> Path:
        """Path of an upstream artifact, checked against its producing manifest."""
        p = self.path(rel)
        if not p.exists():
            raise CliError("missing-artifact", f"{p} does not exist; run the '{stage}' stage first")
        digest = sha256_file(p)
        want = stage_hash(self.cfg, stage)
        for doc in self._producers():
            if rel in doc.get("outputs", {}):
                if doc["stage_hash"] != want:
                    raise CliError("stale-artifact", f"{p} was produced under stage hash {doc['stage_hash']} "
                                                     f"but the current config gives {want}")
                if doc["outputs"][rel] != digest:
                    raise CliError("stale-artifact", f"{p} changed since '{doc['command']}' wrote it")
                break
        else:
            raise CliError("stale-artifact", f"{p} has no manifest entry; re-run the '{stage}' stage")
        self.inputs[rel] = digest
        return p

    def output(self, rel: str) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(rel)
        return p

    def write_manifest(self, stage: str | None = None, extra_seeds: dict | None = None):
        seeds = {"root": self.cfg.seed}
        seeds.update(extra_seeds or {})
        doc = {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "stage_hash": stage_hash(self.cfg, stage) if stage else self.cfg.hash(),
            "config": self.cfg.to_dict(),
            "seeds": seeds,
            "versions": {"scaleup": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "inputs": self.inputs,
            "outputs": {rel: sha256_file(self.path(rel)) for rel in self.outputs},
        }
        p = self.root / "manifests" / f"{self.name}.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def save_dataset(ds: LabeledDataset, path, **extra):
    with open(path, "wb") as f:
        np.savez(f, images=ds.images, labels=ds.labels, class_count=ds.class_count, **extra)


def load_dataset(path) -> tuple[LabeledDataset, dict]:
    with np.load(path) as z:
        extra = {k: z[k] for k in z.files if k not in ("images", "labels", "class_count")}
        return LabeledDataset(z["images"], z["labels"], int(z["class_count"])), extra


def load_datasets(ws: Workspace) -> ex.Datasets:
    parts = [load_dataset(ws.require(f"data/{name}.npz", "synth"))[0] for name in ("train", "test", "local")]
    return ex.Datasets(*parts)


def load_model(ws: Workspace, tag: str) -> models.ConvNet:
    if tag in MODEL_TAGS:
        stage = "train-adaptive" if tag == "adaptive" else "train"
        return models.ConvNet.load(ws.require(f"models/{tag}.json", stage))
    p = Path(tag)
    if not p.exists():
        raise CliError("missing-artifact", f"model checkpoint {p} does not exist")
    ws.inputs[str(p)] = sha256_file(p)
    return models.ConvNet.load(p)


def load_poisoned_test(ws: Workspace, cfg) -> attacks.PoisonedTestSet:
    ds, extra = load_dataset(ws.require("poison/test.npz", "poison"))
    triggers = ex.make_triggers(cfg)
    return attacks.PoisonedTestSet(ds.images, ds.labels, int(extra["target"][0]), ds.class_count, triggers[0][0])


def write_log(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(history):
            w.writerow([i + 1, repr(float(loss))])


# -- commands ------------------------------------------------------------------

def cmd_synth(cfg, ws, args):
    ds = ex.make_datasets(cfg)
    for name in ("train", "test", "local"):
        save_dataset(getattr(ds, name), ws.output(f"data/{name}.npz"))
    ws.write_manifest("synth", {"data": ex.derive_seed(cfg.seed, "data", "train")})
    print(f"train {len(ds.train)}  test {len(ds.test)}  local {len(ds.local)}  shape {ds.train.shape}")


def cmd_poison(cfg, ws, args):
    ds = load_datasets(ws)
    triggers = ex.make_triggers(cfg)
    poisoned, flags = attacks.build_poisoned_dataset(ds.train, ex.make_plan(cfg, triggers))
    save_dataset(poisoned, ws.output("poison/train.npz"), flags=flags)
    tests = ex.poisoned_testsets(cfg, ds.test, triggers)
    merged = ex.merge_testsets(tests)
    targets = np.concatenate([np.full(len(t), t.target) for t in tests])
    save_dataset(LabeledDataset(merged.images, merged.true_labels, merged.class_count),
                 ws.output("poison/test.npz"), target=targets)
    with open(ws.output("poison/triggers.json"), "w") as f:
        json.dump([{"target": t, "trigger": s.to_dict()} for s, t in triggers], f, indent=2, sort_keys=True)
    ws.write_manifest("poison", {"poison": ex.derive_seed(cfg.seed, "poison")})
    print(f"poisoned {int(flags.sum())} of {len(flags)} training samples; {len(merged)} triggered test images")


def _model_tag(args):
    return args.model if args.model in MODEL_TAGS else "custom"


def cmd_train(cfg, ws, args):
    tag = "benign" if args.benign else "poisoned"
    ws.name = f"train-{tag}"
    if args.benign:
        train = load_datasets(ws).train
    else:
        train = load_dataset(ws.require("poison/train.npz", "poison"))[0]
    tcfg = ex.train_config(cfg, "poisoned")
    result = models.train(ex.new_model(cfg), train, tcfg)
    result.model.save(ws.output(f"models/{tag}.json"), training_seed=tcfg.seed)
    write_log(ws.output(f"models/{tag}-log.csv"), result.loss_history)
    ws.write_manifest("train", {"init": ex.derive_seed(cfg.seed, "model", "init") % 2**63, "train": tcfg.seed})
    print(f"{tag} model: final loss {result.loss_history[-1]:.4f}, train accuracy {result.train_accuracy:.4f}")


def cmd_train_adaptive(cfg, ws, args):
    clean = load_datasets(ws).train
    ad = cfg.adaptive
    plan = AdaptivePlan(ex.make_plan(cfg, ex.make_triggers(cfg)), tuple(ad.scales), ad.weight)
    tcfg = models.TrainConfig(ad.epochs, ad.batch_size, ad.learning_rate, ad.momentum,
                              ex.derive_seed(cfg.seed, "train", "poisoned") % 2**63, cfg.model.shuffle,
                              cfg.model.warmup_epochs)
    result = train_adaptive(ex.new_model(cfg), clean, plan, tcfg)
    result.model.save(ws.output("models/adaptive.json"), training_seed=tcfg.seed)
    write_log(ws.output("models/adaptive-log.csv"), result.loss_history)
    ws.write_manifest("train-adaptive", {"train": tcfg.seed})
    print(f"adaptive model: final loss {result.loss_history[-1]:.4f}, train accuracy {result.train_accuracy:.4f}")


def cmd_fit_stats(cfg, ws, args):
    model = load_model(ws, args.model)
    local = load_datasets(ws).local
    stats = detector.fit_class_stats(model, local, cfg.detector.scales)
    ws.name = f"fit-stats-{_model_tag(args)}"
    with open(ws.output(f"stats/{_model_tag(args)}.json"), "w") as f:
        json.dump(stats.to_dict(), f, indent=2, sort_keys=True)
    ws.write_manifest("fit-stats")
    print(f"fitted SPC statistics for {len(stats.mean)} classes, balance {stats.balance:.6g}")


def cmd_detect(cfg, ws, args):
    model = load_model(ws, args.model)
    benign = load_datasets(ws).test
    ptest = load_poisoned_test(ws, cfg)
    images = np.concatenate([ptest.images, benign.images])
    truth = np.r_[np.ones(len(ptest), bool), np.zeros(len(benign), bool)]
    det = cfg.detector
    if det.mode == "data-free":
        report = detector.detect_data_free(model, images, det.scales, det.threshold)
    elif det.mode == "data-limited":
        stats = detector.ClassStats.from_dict(
            json.loads(ws.require(f"stats/{_model_tag(args)}.json", "fit-stats").read_text()))
        report = detector.detect_data_limited(model, images, det.scales, stats, det.threshold, det.normalization)
    else:
        seed = ex.derive_seed(cfg.seed, "noise-variant", "detect")
        scores = detector.noise_variant_score(model, images, det.noise_magnitudes, seed)
        report = detector.DetectionReport(scores, detector.threshold_rule(scores, det.threshold), det.threshold,
                                          "noise-variant", len(det.noise_magnitudes))
    ws.name = f"detect-{_model_tag(args)}-{det.mode}"
    report.write_csv(ws.output(f"detect-{_model_tag(args)}-{det.mode}.csv"), truth)
    ws.write_manifest(None)
    pos, neg = report.scores[truth].mean(), report.scores[~truth].mean()
    print(f"mean score: poisoned {pos:.4f}  benign {neg:.4f}  gap {pos - neg:.4f}")


def cmd_eval(cfg, ws, args):
    datasets = ex.make_datasets(cfg)
    triggers = ex.make_triggers(cfg)
    if args.model is not None and args.model != "poisoned":
        model = load_model(ws, args.model)
    else:
        model = ex.train_poisoned(cfg, datasets).model
    mode = cfg.detector.mode
    modes = (mode,) if mode == "data-free" else ("data-free", mode)
    ev = ex.evaluate(cfg, model, datasets, triggers, modes)
    roc = ev.roc[mode]
    roc.write_csv(ws.output("roc.csv"))
    roc.write_svg(ws.output("roc.svg"), title=f"SCALE-UP {mode}")
    pos, neg = ev.scores[mode]
    with open(ws.output("scores.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "true_is_poisoned", "score", "mode"])
        for i, s in enumerate(np.r_[pos, neg]):
            w.writerow([i, int(i < len(pos)), repr(float(s)), mode])
    with open(ws.output("summary.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in ev.summary_rows():
            w.writerow([k, repr(float(v))])
    ws.write_manifest(None, {"eval-noise": ex.derive_seed(cfg.seed, "eval-noise")})
    print(f"AUROC {ev.auroc[mode]:.4f} ({mode})  ASR {ev.asr:.4f}  clean accuracy {ev.clean_accuracy:.4f}")


def cmd_theorem_check(cfg, ws, args):
    rows = ex.kernel_check(cfg)
    write_theorem1_csv(rows, ws.output("theorem1.csv"))
    ws.write_manifest(None, {"kernel": ex.derive_seed(cfg.seed, "kernel", "split")})
    for f in sorted({r.fraction for r in rows}):
        rates = [r.target_rate for r in rows if r.fraction == f]
        print(f"fraction {f:g}: target rate min {min(rates):.3f} max {max(rates):.3f}")
    rep = monotonicity_report(rows)
    print(f"(gamma, n) pairs not monotone in the poison fraction: {sum(not ok for ok in rep.values())}")


def _grid_value(text):
    try:
        return int(text)
    except ValueError:
        return float(text)


def cmd_sweep(cfg, ws, args):
    if not args.param:
        raise CliError("usage", "sweep needs --param")
    grid = [_grid_value(v) for v in args.grid.split(",") if v.strip()] if args.grid else []
    rows = ex.sweep(cfg, args.param, grid, workers=args.workers)
    ws.name = f"sweep-{args.param}"
    ex.write_rows_csv(rows, ws.output(f"sweep-{args.param}.csv"))
    ws.write_manifest(None)
    for r in rows:
        print("  ".join(f"{k} {v:.4f}" if isinstance(v, float) else f"{k} {v}" for k, v in r.items()))


def cmd_confidence_curve(cfg, ws, args):
    model = load_model(ws, args.model)
    benign = load_datasets(ws).test
    ptest = load_poisoned_test(ws, cfg)
    scales = list(range(1, 12))
    b = confidence_curve(model, benign.images, scales)
    p = confidence_curve(model, ptest.images, scales)
    ws.name = f"confidence-curve-{_model_tag(args)}"
    with open(ws.output(f"confidence-{_model_tag(args)}.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scale", "benign", "poisoned"])
        for n, x, y in zip(scales, b, p):
            w.writerow([n, repr(float(x)), repr(float(y))])
    ws.write_manifest(None)
    print(f"n=1: benign {b[0]:.3f} poisoned {p[0]:.3f}   n=11: benign {b[-1]:.3f} poisoned {p[-1]:.3f}")


def cmd_bench(cfg, ws, args):
    model = load_model(ws, args.model)
    images = load_datasets(ws).test.images[:args.batch]
    scales = cfg.detector.scales
    rows = [("0", True, bench_overhead(model, (), images, args.repeats)),
            (str(len(scales)), True, bench_overhead(model, scales, images, args.repeats)),
            (str(len(scales)), False, bench_overhead(model, scales, images, args.repeats, batched=False))]
    with open(ws.output("bench.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scale_count", "batched", "inference_seconds", "detection_seconds", "ratio"])
        for k, batched, o in rows:
            w.writerow([k, int(batched), repr(o.inference_seconds), repr(o.detection_seconds), repr(o.ratio)])
    ws.write_manifest(None)
    for k, batched, o in rows:
        print(f"|S|={k} {'batched' if batched else 'sequential'}: ratio {o.ratio:.3f}")


COMMANDS = {
    "synth": cmd_synth, "poison": cmd_poison, "train": cmd_train, "train-adaptive": cmd_train_adaptive,
    "fit-stats": cmd_fit_stats, "detect": cmd_detect, "eval": cmd_eval, "theorem-check": cmd_theorem_check,
    "sweep": cmd_sweep, "confidence-curve": cmd_confidence_curve, "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scaleup", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration (defaults apply to missing keys)")
    parser.add_argument("--out", help="output directory (overrides the config's 'out')")
    parser.add_argument("--seed", type=int, help="root seed (overrides the config)")
    parser.add_argument("--mode", choices=("data-free", "data-limited", "noise-variant"),
                        help="detector mode (overrides detector.mode)")
    parser.add_argument("--model", default=None,
                        help="model tag (poisoned, benign, adaptive) or checkpoint path")
    parser.add_argument("--benign", action="store_true", help="train: fit the clean twin instead")
    parser.add_argument("--param", choices=ex.SWEEP_PARAMETERS, help="sweep: parameter to vary")
    parser.add_argument("--grid", help="sweep: comma-separated values")
    parser.add_argument("--workers", type=int, default=1, help="sweep: worker processes")
    parser.add_argument("--repeats", type=int, default=100, help="bench: timed repetitions")
    parser.add_argument("--batch", type=int, default=1, help="bench: images per query batch")
    return parser


def load_config(args) -> ex.RunConfig:
    cfg = ex.RunConfig.load(args.config) if args.config else ex.RunConfig()
    overrides = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise CliError("config", "--seed must be an unsigned 64-bit integer")
        overrides["seed"] = args.seed
    if args.out:
        overrides["out"] = args.out
    if args.mode:
        overrides["detector.mode"] = args.mode
    return cfg.replace(**overrides) if overrides else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.model is None and args.command != "eval":
            args.model = "poisoned"
        ws = Workspace(cfg.out, cfg, args.command)
        COMMANDS[args.command](cfg, ws, args)
    except ex.ConfigError as exc:
        _fail("config", "; ".join(exc.errors))
        return 2
    except CliError as exc:
        _fail(exc.kind, str(exc))
        return 1
    except FileNotFoundError as exc:
        _fail("missing-file", str(exc))
        return 1
    except json.JSONDecodeError as exc:
        _fail("config", f"invalid JSON: {exc}")
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        _fail(type(exc).__name__, str(exc))
        return 1
    return 0


def _fail(kind, message):
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
