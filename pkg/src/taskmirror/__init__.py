"""Mirror real-world issues into pre-configured executable gyms."""

__version__ = "0.1.0"
