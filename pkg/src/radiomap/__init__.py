"""Multiband radiomap estimation from sparse observations on synthetic urban scenes."""

__version__ = "0.1.0"
