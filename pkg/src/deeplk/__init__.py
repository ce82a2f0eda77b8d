"""Deep-LK: inverse-compositional Lucas-Kanade as a template-conditioned
regressor, with learnable features and an adaptive object tracker."""

__version__ = "0.1.0"
