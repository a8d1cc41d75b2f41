"""Contrastive speech/translation encoders with numpy-only autodiff."""

__version__ = "0.1.0"
