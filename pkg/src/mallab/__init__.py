"""Multi-attribution learning lab for conversion-rate prediction."""

__version__ = "0.1.0"
