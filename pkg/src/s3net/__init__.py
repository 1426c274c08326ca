"""Desk-scale laboratory for language-adaptive self-supervised speech
pretraining with sparse sharing sub-networks.

The pipeline: contrastive pretraining of a miniature multilingual speech
encoder, per-language sub-network extraction (magnitude, Taylor-expansion
importance, or random), masked joint adaptation where every language trains
only its own sub-network, and mask/transfer analysis.
"""

__version__ = "0.1.0"
