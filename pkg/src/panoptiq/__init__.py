"""Position-guided query-based panoptic segmentation of LiDAR point clouds, at desk scale."""

__version__ = "0.1.0"
