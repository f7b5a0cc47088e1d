"""Desk-scale numerical core for two-stage PBR material generation on meshes."""

__version__ = "0.1.0"
