"""Dated phylogenies from binary trait data under the stochastic Dollo model."""

__version__ = "0.1.0"

from .likelihood import (  # noqa: E402
    ObservationModel,
    TraitMatrix,
    log_likelihood,
    log_likelihood_marginal_lambda,
    two_leaf_mle,
    two_leaf_posterior_logpdf,
)
from .tree import CalibrationSet, CladeConstraint, DatedTree, LeafAgeInterval  # noqa: E402

__all__ = [
    "CalibrationSet",
    "CladeConstraint",
    "DatedTree",
    "LeafAgeInterval",
    "ObservationModel",
    "TraitMatrix",
    "log_likelihood",
    "log_likelihood_marginal_lambda",
    "two_leaf_mle",
    "two_leaf_posterior_logpdf",
]
