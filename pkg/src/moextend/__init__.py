"""Desk-scale lab for grafting new-modality experts into a frozen MoE language model."""

__version__ = "0.1.0"
