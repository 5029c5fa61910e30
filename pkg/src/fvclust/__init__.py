"""Bayesian functional clustering of binary longitudinal data.

A probit varying-coefficient mixed model whose cluster-level coefficient
functions follow a truncated Dirichlet-process mixture, fitted by a partially
collapsed Gibbs sampler.
"""
__version__ = "0.1.0"
