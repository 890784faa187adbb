"""Half-space adapted homogenization correctors on finite-difference grids."""
from .correctors import CorrectorSet, compute_correctors
from .estimators import HalfSpaceAdapter, TiltExcess, WholeSpaceCorrector
from .fields import CoefficientField, GridSpec
from .halfspace import AdaptConfig, HalfSpaceCorrector, induction_driver

__all__ = ["AdaptConfig", "CoefficientField", "CorrectorSet", "GridSpec", "HalfSpaceAdapter",
           "HalfSpaceCorrector", "TiltExcess", "WholeSpaceCorrector", "compute_correctors",
           "induction_driver"]
