"""Sequence forecasting over point-cloud streams with D-Conv recurrent cells."""
from .dconv import DConvConfig, DConvWeights, dconv, dconv_apply
from .forecaster import CloudForecaster, ForecasterConfig
from .pointcloud import PointCloudFrame
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["CloudForecaster", "DConvConfig", "DConvWeights", "ForecasterConfig",
           "PointCloudFrame", "Tensor", "dconv", "dconv_apply"]
