"""An attacker who knows about the detector, and what it costs them.

The adaptive attacker adds a loss term asking amplified poisoned images to
keep their original label, so triggered inputs stop looking consistent under
scaling. That hides them from the detector, but the backdoor becomes brittle:
mild Gaussian noise on the triggered input is enough to break it, while the
ordinary backdoor shrugs the same noise off.

    python demos/adaptive_attack.py
"""
from scaleup import experiment as ex

cfg = ex.RunConfig()
print("training the vanilla and adaptive poisoned models (about 1 min) ...")
run = ex.train_poisoned(cfg)
adaptive = ex.run_adaptive(cfg, run.datasets).model

for name, model in (("vanilla", run.model), ("adaptive", adaptive)):
    ev = ex.evaluate(cfg, model, run.datasets, run.triggers, modes=("data-free",))
    curve = ex.noise_probe(cfg, model, run.datasets, run.triggers)
    probe = ", ".join(f"{sigma:.1f}: {asr:.2f}" for sigma, asr in curve)
    print(f"{name:8s} AUROC {ev.auroc['data-free']:.3f}  accuracy {ev.clean_accuracy:.3f}  "
          f"ASR under noise {{{probe}}}")
