"""Copula-invariance instrumental variables.

Identification and estimation of potential-outcome distributions and
treatment effects for binary, ordered, and continuous treatments with a
binary instrument, built on a local Gaussian copula representation.
"""

__version__ = "0.1.0"
