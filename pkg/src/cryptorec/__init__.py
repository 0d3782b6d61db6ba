"""Privacy-preserving recommendation with an item-only latent model served under homomorphic encryption."""

__version__ = "0.1.0"
