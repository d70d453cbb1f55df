"""Exact asymptotics of uncertainty metrics for random-features classifiers.

The package computes, in the proportional high-dimensional limit, the test
error, calibration, expected calibration error and conditional variance of
four probabilistic classifiers (regularized logistic regression, the
Bayes-optimal posterior mean, empirical Bayes, and the Laplace
approximation) trained on the random-features model, and validates the
asymptotic predictions against finite-size Monte Carlo simulation and
generalized approximate message passing.
"""

__version__ = "0.1.0"
