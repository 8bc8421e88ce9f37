"""Relevance metrics for similarity-based explanation and the tests that
check whether a metric meets minimal faithfulness/plausibility requirements."""

__version__ = "0.1.0"
