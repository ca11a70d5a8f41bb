"""Variational Bayes for multi-subject VAR effective-connectivity networks."""
from .data import (LaggedDesign, SmoothingMatrix, StructuralPrior, StudyDataset,
                   ValidationError, build_lagged_design, center, flat_index, triple)
from .vb import FitResult, Hyperparameters, NumericalError, fit

__version__ = "0.1.0"
