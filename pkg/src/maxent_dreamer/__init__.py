"""Maximum-entropy exploration over a learned latent world model."""

__version__ = "0.1.0"
