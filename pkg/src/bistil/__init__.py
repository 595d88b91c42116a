"""Bilingual distillation of multilingual encoders at desk scale."""

__version__ = "0.1.0"
