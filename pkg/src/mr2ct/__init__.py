"""Patch-based 3D adversarial MR-to-CT synthesis with auto-context refinement."""

__version__ = "0.1.0"
