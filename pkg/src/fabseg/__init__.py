"""Farmland region and boundary delineation with a Prompter-driven SAM-style block."""

__version__ = "0.1.0"
