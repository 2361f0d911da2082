"""Sound certification of Gaussian-posterior Bayesian neural networks.

Given a network whose weight rows carry independent Gaussian posteriors,
this package computes guaranteed lower and upper bounds on the posterior
predictive expectation over an input box, and derives robustness
certificates (expectation envelopes, gamma-robustness for regression,
decision invariance and maximum certified radius for classification).
"""

__version__ = "0.1.0"
