"""Rhythm-aware masked autoregressive pretraining for 12-lead ECG."""

from .config import RunConfig
from .ontology import ConceptGraph, build_graph
from .snomed import LeafTarget, resolve_codes, soft_target

__version__ = "0.1.0"

__all__ = ["ConceptGraph", "LeafTarget", "RunConfig", "build_graph", "resolve_codes", "soft_target"]
