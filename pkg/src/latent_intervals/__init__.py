"""Risk-controlled uncertainty intervals over disentangled latent factors."""

__version__ = "0.1.0"
