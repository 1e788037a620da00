"""Training-data attribution for diffusion models by mirrored unlearning."""

__version__ = "0.1.0"
