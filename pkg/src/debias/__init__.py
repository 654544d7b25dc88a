"""Inclusion-probability estimation for biased platform counts against census strata."""

__version__ = "0.1.0"
