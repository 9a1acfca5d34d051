"""Monte Carlo verification of Wasserstein-contraction CLTs for Markov processes."""

__version__ = "0.1.0"
