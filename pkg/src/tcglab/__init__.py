"""Trust-region minimization with truncated CG, and a laboratory for the
Lanczos/CG polynomials that govern CG on nearly singular problems."""

__version__ = "0.1.0"
