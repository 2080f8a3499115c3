"""Numerical verification toolkit for spike-variation maximum principles of controlled SEEs."""
__version__ = "0.1.0"
