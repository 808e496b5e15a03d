"""Behavior-anchored LLM WebShell detection for PHP."""

from bfad.extraction import ExtractedView, ExtractionConfig, extract
from bfad.profiling import Label, WeightVector
from bfad.registry import BehaviorCategory, CriticalFunctionRegistry, load_default_registry
from bfad.scanner import FunctionOccurrence, SourceFile, scan

__all__ = [
    "BehaviorCategory",
    "CriticalFunctionRegistry",
    "ExtractedView",
    "ExtractionConfig",
    "FunctionOccurrence",
    "Label",
    "SourceFile",
    "WeightVector",
    "extract",
    "load_default_registry",
    "scan",
]
