"""Pan-sharpening with high-pass modification blocks."""

__version__ = "0.1.0"

from .classical import ClassicalPansharpener
from .hmcnn import HmcnnConfig
from .isodata import Isodata
from .metrics import MetricReport, evaluate_all
from .raster import BandRole, Raster, read_raster, write_raster
from .training import HMCNNPansharpener, TrainConfig

__all__ = [
    "BandRole",
    "ClassicalPansharpener",
    "HMCNNPansharpener",
    "HmcnnConfig",
    "Isodata",
    "MetricReport",
    "Raster",
    "TrainConfig",
    "evaluate_all",
    "read_raster",
    "write_raster",
]
