"""Probabilistic vectorized-map engine and multi-traversal crowdsourcing simulator."""

from crowdmap.map_model import (
    V,
    ElementClass,
    LaplaceScale,
    MapElement,
    MapVertex,
    Pose2,
    VectorMap,
    chamfer_distance,
    crop_map,
    laplace_nll,
    resample_fixed,
    transform_element,
)

__all__ = [
    "V",
    "ElementClass",
    "LaplaceScale",
    "MapElement",
    "MapVertex",
    "Pose2",
    "VectorMap",
    "chamfer_distance",
    "crop_map",
    "laplace_nll",
    "resample_fixed",
    "transform_element",
]

__version__ = "0.1.0"
