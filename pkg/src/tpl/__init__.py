"""Continual-learning engine: masked task-specific models, replay, and
likelihood-ratio task-id scoring, with a small theory lab and CLI around them."""

__version__ = "0.1.0"
