"""Max-Mahalanobis center loss, its competitor losses, sample-density
analysis in feature space, and the attacks used to evaluate them."""

__version__ = "0.1.0"
