"""gwlab: numerics for discrete lossy Gray-Wyner source coding.

Rate-distortion and common-rate solvers, tilted information densities,
second-order/dispersion and deviations analysis, closed-form ground truth for
the doubly symmetric binary source, and a method-of-types code simulator.
"""

__version__ = "0.1.0"
