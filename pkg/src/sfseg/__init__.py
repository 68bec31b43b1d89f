"""Source-free domain-adaptive segmentation on a procedural benchmark."""

__version__ = "0.1.0"
