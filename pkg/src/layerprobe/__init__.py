"""Layer-wise probing of speech encoder representations."""

__version__ = "0.1.0"
