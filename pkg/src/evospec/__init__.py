"""Nonstationary space-time temperature models built from evolutionary spectra."""

__version__ = "0.1.0"
