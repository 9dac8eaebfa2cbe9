"""Conditional denoising diffusion on icosahedral meshes for cortical
normative modeling: mesh construction, a spherical UNet denoiser,
v-parameterized diffusion, deviation scoring and a synthetic cohort."""

from .featuremap import FeatureMap, load_feature_map, save_feature_map
from .icosphere import (
    IcosphereMesh,
    ROIAtlas,
    build_icosphere,
    ordered_ring,
    prefix_count,
    voronoi_atlas,
)
from .schedule import NoiseSchedule, cosine_schedule

__all__ = [
    "FeatureMap",
    "IcosphereMesh",
    "NoiseSchedule",
    "ROIAtlas",
    "build_icosphere",
    "cosine_schedule",
    "load_feature_map",
    "ordered_ring",
    "prefix_count",
    "save_feature_map",
    "voronoi_atlas",
]
