"""Rotation-invariant masked autoencoding for point clouds."""

from .errors import (
    ConfigError,
    DataError,
    EmptyCloudError,
    HfbriError,
    NumericError,
    ParseError,
    ShapeError,
    SizeError,
)
from .estimators import HFBRIClassifier, HFBRIMAE, RIHFTransformer
from .mae import HfbriMae, ModelConfig
from .pcio import PointCloud, generate_synthetic, load_point_cloud, normalize_unit_sphere
from .probe import LinearProbe

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "EmptyCloudError", "HFBRIClassifier", "HFBRIMAE", "HfbriError",
    "HfbriMae", "LinearProbe", "ModelConfig", "NumericError", "ParseError", "PointCloud",
    "RIHFTransformer", "ShapeError", "SizeError", "generate_synthetic", "load_point_cloud",
    "normalize_unit_sphere",
]
