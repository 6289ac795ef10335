"""Semi-supervised contrastive learning with similarity co-calibration.

A small, fully deterministic implementation of joint pseudo-label /
multi-positive contrastive training over a shared MLP encoder, exercised on
seeded synthetic datasets. See README.md for the CLI entry points.
"""

__version__ = "0.1.0"
