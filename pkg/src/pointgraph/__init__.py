"""Point cloud classification with message passing over learned k-NN graphs."""

__version__ = "0.1.0"
