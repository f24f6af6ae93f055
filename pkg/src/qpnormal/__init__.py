"""Normal forms for quasi-periodically driven quantum lattice systems."""

__version__ = "0.1.0"
