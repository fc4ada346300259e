"""Image-folder to .bagemb exporter."""

__version__ = "0.1.0"
