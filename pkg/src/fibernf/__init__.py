"""Fibered symplectic normal forms of convex Hamiltonians along orbit segments."""

__version__ = "0.1.0"
