"""Irregular multivariate time-series classification with a masked GRU and
three explainability layers: information-theoretic feature scoring,
intrinsic per-variable attention, and post-hoc Shapley attribution."""

from . import cmi, data, evaluation, itshap, model, numerics  # noqa: F401

__version__ = "0.1.0"
