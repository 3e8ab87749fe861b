"""Moving horizon estimation for dynamics learned with GP regression."""

__version__ = "0.1.0"
