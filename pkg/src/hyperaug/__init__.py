"""Joint training of a small image classifier and its augmentation policy.

Policy hypergradients come from implicit differentiation with a truncated
Neumann-series inverse Hessian; an unrolled-differentiation baseline is
included for comparison.
"""
__version__ = "0.1.0"
