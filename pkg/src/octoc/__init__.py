"""Numerical optimal control: direct transcription, PMP shooting, HJB grids and optimistic planning."""

__version__ = "0.1.0"
