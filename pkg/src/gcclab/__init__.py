"""Escape functions, geometric control and local energy decay for damped stationary waves.

Modules: metric (coefficients, damping, asymptotic flatness), halfwave (b±
and Phi±), flow (bicharacteristics and GCC audits), escape (escape-function
symbols and the sampled positivity check), solver (damped wave evolution and
local energy norms), runner (CLI).
"""

__version__ = "0.1.0"
