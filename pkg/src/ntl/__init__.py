"""Non-transferable learning: domain-restricted classifiers for ownership verification and usage authorization."""

__version__ = "0.1.0"
