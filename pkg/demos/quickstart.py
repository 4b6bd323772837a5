"""Detect backdoored inputs to a poisoned classifier using only its hard labels.

We train a small ConvNet on synthetic 16x16 images where 10% of the training
set carries a random-pixel patch relabeled to class 0. The detector never
looks inside the model: it amplifies each query's pixels by 3, 5, 7, 9 and 11
and counts how often the predicted label survives. Triggered inputs keep
their label under amplification far more often than clean ones.

    python demos/quickstart.py
"""
import numpy as np

from scaleup import detector, models
from scaleup import experiment as ex

cfg = ex.RunConfig()
print("training the poisoned model (about 15 s) ...")
run = ex.train_poisoned(cfg)
test = run.datasets.test
triggered = ex.merge_testsets(ex.poisoned_testsets(cfg, test, run.triggers))
print(f"clean accuracy {models.accuracy(run.model, test):.3f}, "
      f"attack success rate {models.attack_success_rate(run.model, triggered):.3f}")

# Scaled prediction consistency on a handful of inputs from each side.
clean_spc = detector.spc(run.model, test.images[:200])
triggered_spc = detector.spc(run.model, triggered.images[:200])
print(f"mean SPC: clean {clean_spc.mean():.3f}, triggered {triggered_spc.mean():.3f}")

# Threshold rule: flag an input when SPC > T.
report = detector.detect_data_free(run.model, np.concatenate([test.images[:5], triggered.images[:5]]))
for i, (score, flagged) in enumerate(zip(report.scores, report.verdicts)):
    kind = "clean" if i < 5 else "triggered"
    print(f"  {kind:9s} SPC {score:.1f} -> {'malicious' if flagged else 'benign'}")

# The full evaluation adds noisy copies and compares both detector settings.
ev = ex.evaluate(cfg, run.model, run.datasets, run.triggers)
for mode, value in sorted(ev.auroc.items()):
    print(f"AUROC ({mode}): {value:.3f}")
