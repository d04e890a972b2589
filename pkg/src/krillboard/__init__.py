"""Specimen board photo pipeline: detection, curation, estimation, annotation service."""

__version__ = "0.1.0"
