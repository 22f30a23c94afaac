"""Video-based surgical skill scoring from zero-shot tool masks."""

__version__ = "0.1.0"
