"""Multi-level image-gene contrastive pretraining for spatial transcriptomics, on numpy."""

__version__ = "0.1.0"
