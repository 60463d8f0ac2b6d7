"""
Fingerprints and layer sensitivity
==================================

A fingerprint perturbs the inputs of a few sampled layers per category,
measures the resulting gradients, and averages over repeated rounds into 16
numbers. A sensitivity profile instead applies one fixed perturbation to
every projection layer and ranks layers by mean gradient norm.
"""

import tempfile
from pathlib import Path

from gradprint.fingerprint import FIELDS, ExtractionConfig, extract_fingerprint, sensitivity_profile, vectorize
from gradprint.perturb import HighFrequency
from gradprint.synth import SynthSpec, generate_family

workdir = Path(tempfile.mkdtemp())
base, derivatives, _ = generate_family(SynthSpec(), 1, workdir)

# Fewer rounds than the default keeps this quick; the result stays deterministic.
config = ExtractionConfig(iterations=10, sample_size=100_000)
fp_base = extract_fingerprint(base, config)
fp_deriv = extract_fingerprint(derivatives[0], config)
for name, a, b in zip(FIELDS, vectorize(fp_base), vectorize(fp_deriv)):
    print(f"{name:>16}  base {a: .5g}  derivative {b: .5g}")

print("sampled layers:", fp_base.extraction["selected_layers"])

profile = sensitivity_profile(base, HighFrequency(0.5), iterations=10)
ranked = sorted(profile.scores.items(), key=lambda kv: -kv[1][1])
for layer, (raw, z) in ranked[:5]:
    print(f"{z:+.2f}  {raw:.3f}  {layer}")
