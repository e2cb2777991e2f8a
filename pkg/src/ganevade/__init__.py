"""Query-free evasion toolkit: GAN feature synthesis plus PE rewriting."""

__version__ = "0.1.0"
