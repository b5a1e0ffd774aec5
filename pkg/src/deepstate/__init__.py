"""Deep state-space analysis of multivariate clinical time series."""

__version__ = "0.1.0"
