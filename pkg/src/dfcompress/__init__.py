"""Data-free compression lab: adversarial distillation into binarized or
filter-pruned students, plus numerical checks of the minimax convergence
bounds on analytic saddle problems."""

__version__ = "0.1.0"
