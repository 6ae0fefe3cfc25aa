"""Two-stage cerebral microbleed detection and segmentation."""

__version__ = "0.1.0"
