"""Spectral-Galerkin harness for semilinear damped wave equations."""
