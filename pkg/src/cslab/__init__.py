"""cslab: content/style identification experiments on synthetic multi-domain data."""

__version__ = "0.1.0"
