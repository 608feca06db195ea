"""Internal node bagging: grouped training, weight averaging and node combination."""

__version__ = "0.1.0"
