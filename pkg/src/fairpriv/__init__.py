"""Desk-scale study of debiasing and differential privacy in LM training.

Trains a small autoregressive transformer under combinations of
counterfactual data augmentation, elevated dropout and DP-SGD over low-rank
adapters, then measures bias (association tests, profession-pair scores,
context-association triplets), leakage (likelihood-ratio membership
inference) and utility (perplexity).
"""

__version__ = "0.1.0"
