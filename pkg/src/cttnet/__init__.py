"""Cross-token transformer for two-view regression with a scalar prior.

Modules:
    tensor: float64 tensors with tape-based reverse-mode differentiation.
    encoder: per-view residual CNN, patch tokens and the preoperative VA token.
    ctt: token sequences, encoder layers, cross-token exchange, fusion modes.
    objectives: regression and auxiliary losses, metrics, gap statistics.
    data: manifests, PGM IO, augmentation, synthetic data, k-fold splits.
    train: SGD training, cross-validation, baseline comparison.
    cli: the ``cttnet`` command.
"""

__version__ = "0.1.0"
