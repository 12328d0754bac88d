"""Toolkit for heterogeneous vibration corpora: harmonization, cross-domain
temporal fusion, contrastive pretraining of a patch transformer, and few-shot
evaluation.

Submodules are imported lazily by the CLI; importing :mod:`unifault` itself
stays cheap (no torch import).
"""

__version__ = "0.1.0"
