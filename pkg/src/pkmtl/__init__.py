"""Personalized keyword spotting with multi-task keyword/speaker learning.

Modules:
    autodiff     reverse-mode automatic differentiation, optimizers, checkpoints
    features     WAV I/O, log-mel and MFCC features, stream segmentation
    synthetic    deterministic synthetic keyword/speaker corpus
    dataset      manifests, Speech Commands ingestion, evaluation pairs, samplers
    model        multi-task encoder with cosine classifiers and its training loop
    adaptation   score combination (SCM) and task representation module (TRM)
    metrics      EER and constrained error rates, thresholds, reports
    evaluation   per-task and streaming evaluation drivers
    cli          command-line pipelines
"""

__version__ = "0.1.0"
