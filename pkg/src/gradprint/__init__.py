"""Gradient-response fingerprints for safetensors models."""

__version__ = "0.1.0"

from .errors import GradprintError  # noqa: E402
from .fingerprint import (  # noqa: E402
    ExtractionConfig,
    Fingerprint,
    extract_fingerprint,
    sensitivity_profile,
    vectorize,
)
from .famclass import Registry, classify_unknown, fit_centroid_kmeans, pairwise_distance  # noqa: E402
from .tensorfile import SafetensorsFile, merge_shards, read_tensor, validate, write_file  # noqa: E402
from .adapters import merge_lora  # noqa: E402

__all__ = [
    "ExtractionConfig", "Fingerprint", "GradprintError", "Registry", "SafetensorsFile",
    "classify_unknown", "extract_fingerprint", "fit_centroid_kmeans", "merge_lora", "merge_shards",
    "pairwise_distance", "read_tensor", "sensitivity_profile", "validate", "vectorize", "write_file",
]
