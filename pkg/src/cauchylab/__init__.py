"""Numerical laboratory for conditional stability of elliptic Cauchy problems.

Subpackages cover the classical instability example, frequency-function
three-spheres inequalities, planar quasiconformal tools, propagation of
smallness along chains of balls, Cauchy-data extension, and an end-to-end
stability probe exposed through the ``cauchy-lab`` command line tool.
"""

__version__ = "0.1.0"
