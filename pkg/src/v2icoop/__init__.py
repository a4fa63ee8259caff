"""Asynchronous V2I cooperative perception with roadside delay compensation."""

__version__ = "0.1.0"
