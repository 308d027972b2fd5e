"""Light real-time fault detection for freight-train inspection images, in numpy."""

__version__ = "0.1.0"
