"""Opacify-then-estimate-depth pipeline for transparent objects, at desk scale."""

__version__ = "0.1.0"
