"""Two-stage microgrid diagnosis: GAN-based FDI screening and switch-fault classification."""

__version__ = "0.1.0"
