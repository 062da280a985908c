"""Desk-scale adversarial attack/defense laboratory.

A small numpy-backed stack: tape autodiff, fixed conv/autoencoder model specs,
two-stage defense training, FGSM/BIM/CW attacks, threat-model scenario
runners, and gradient/similarity analysis, all bit-reproducible from seeds.
"""

__version__ = "0.1.0"
