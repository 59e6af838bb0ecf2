"""Flow-based monocular 3D human motion estimation."""

__version__ = "0.1.0"
