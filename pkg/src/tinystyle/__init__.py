"""tinystyle: a small, fully reproducible style-based GAN lab on numpy."""

__version__ = "0.1.0"
