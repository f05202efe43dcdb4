"""Forward-folding likelihood analysis with response-matrix uncertainties."""

from .binning import Binning, BinningError, EventRecord, parse_binning, serialize_binning
from .likelihood import CompositeHypothesis, LikelihoodMachine, TemplateHypothesis
from .response import ResponseBuilder, ResponseMatrixSet

__version__ = "0.1.0"

__all__ = [
    "Binning",
    "BinningError",
    "EventRecord",
    "parse_binning",
    "serialize_binning",
    "ResponseBuilder",
    "ResponseMatrixSet",
    "LikelihoodMachine",
    "CompositeHypothesis",
    "TemplateHypothesis",
]
