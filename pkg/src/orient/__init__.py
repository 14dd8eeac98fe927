"""Retrieval-based 3D orientation estimation over a database of rotation-labeled feature pyramids."""

from .errors import OrientError
from .features import ExtractorConfig, FeaturePyramid, extract
from .fusion import FusionParams, Variant, fuse, init_params, similarity_maps
from .refdb import ObjectSource, ReferenceDB, build
from .retrieval import FastConfig, RetrievalResult, fast_retrieve, greedy_search, recognize_category

__all__ = [
    "ExtractorConfig",
    "FastConfig",
    "FeaturePyramid",
    "FusionParams",
    "ObjectSource",
    "OrientError",
    "ReferenceDB",
    "RetrievalResult",
    "Variant",
    "build",
    "extract",
    "fast_retrieve",
    "fuse",
    "greedy_search",
    "init_params",
    "recognize_category",
    "similarity_maps",
]
__version__ = "0.1.0"
