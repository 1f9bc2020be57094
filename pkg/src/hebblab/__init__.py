"""Two-phase CNN training lab: gated Hebbian regularization, pairwise metric
fine-tuning, and a filter/embedding analysis suite."""

__version__ = "0.1.0"
