"""LungViT: inspiratory-to-expiratory CT translation at desk scale."""

__version__ = "0.1.0"
