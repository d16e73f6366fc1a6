"""Federated mutual knowledge transfer between one large and several small toy language models."""

__version__ = "0.1.0"
