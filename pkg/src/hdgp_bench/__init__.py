"""Multi-task surrogate benchmark: exact GPs, two-layer deep GPs and dense encoder-decoders."""

__version__ = "0.1.0"
