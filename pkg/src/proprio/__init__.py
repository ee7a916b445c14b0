"""Thermodynamic training of small sequence models with entropy-halt
coupling analysis: task generation, matched-capacity SSM/Transformer,
training, evaluation, coupling statistics, regime control, experiments."""

__version__ = "0.1.0"
