"""Multi-view guided latent optimization for hairstyle transfer."""

__version__ = "0.1.0"
