"""Joint morphology/control optimization for planar articulated agents."""

__version__ = "0.1.0"
