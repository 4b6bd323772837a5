"""Why amplified triggers stay put: a kernel-regression view.

An RBF kernel smoother stands in for an over-fitted network. Once half of the
training mix is triggered and relabeled, every triggered held-out image is
classified as the target however strongly its pixels are amplified. With
fewer poisoned samples the effect weakens, most visibly at large scales.

    python demos/kernel_limit.py
"""
from scaleup import experiment as ex

rows = ex.kernel_check(ex.RunConfig())
scales = sorted({r.n for r in rows})
for gamma in sorted({r.gamma for r in rows}):
    print(f"gamma = {gamma:g}: target-label rate by amplification n = {', '.join(f'{n:g}' for n in scales)}")
    for fraction in sorted({r.fraction for r in rows}):
        rates = [r.target_rate for r in rows if r.gamma == gamma and r.fraction == fraction]
        print(f"  poison fraction {fraction:4.2f}: " + " ".join(f"{v:4.2f}" for v in rates))
