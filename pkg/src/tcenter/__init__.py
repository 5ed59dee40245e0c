"""Simulation of a T-center spin register: an electron coupled to 29Si and 1H nuclei."""

from .register import ConfigurationError, RegisterConfig, catalog_for

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "RegisterConfig", "catalog_for", "__version__"]
