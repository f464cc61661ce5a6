"""Survival analysis as Poisson regression on piece-wise exponential data."""
from .survdata import CsvSchema, FeatureSchema, SubjectSpan, SurvivalDataset, load_csv, validate, write_csv
from .ped import CutPoints, PedDataset, make_cutpoints, ped_loglik, transform

__version__ = "0.1.0"
