"""Multi-range, multi-resolution bird's-eye-view terrain mapping.

Synthetic sensing, voxel-map aggregation, camera/LiDAR BEV feature
projection, hierarchical two-range traversability and elevation prediction,
hindsight + DEM pseudo ground truth, region-partitioned evaluation, and a
kinematic lattice planner on the produced maps.
"""

from .gridmap import (
    GridMap,
    MICRO,
    Pose2p5,
    RangeSpec,
    RegionLabel,
    SHORT,
    center_crop,
    downsample_micro_to_short,
    rescale_elevation,
    unrescale_elevation,
    world_to_cell,
)

__version__ = "0.1.0"

__all__ = [
    "GridMap",
    "MICRO",
    "Pose2p5",
    "RangeSpec",
    "RegionLabel",
    "SHORT",
    "center_crop",
    "downsample_micro_to_short",
    "rescale_elevation",
    "unrescale_elevation",
    "world_to_cell",
    "__version__",
]
