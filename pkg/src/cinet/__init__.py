"""Causal-intervention defect segmentation for industrial point clouds."""

from cinet.geometry import PointCloud, SpatialIndex, build_spatial_index, farthest_point_sample, knn_query
from cinet.gmm import GmmModel, gmm_density, gmm_fit
from cinet.metrics import ConfusionCounts, MetricsReport, confusion_counts, report
from cinet.pipeline import CINetModel, TrainConfig, evaluate, intervene_predict, train
from cinet.quality import QualityFeature, quality_vector

__version__ = "0.1.0"

__all__ = [
    "CINetModel",
    "ConfusionCounts",
    "GmmModel",
    "MetricsReport",
    "PointCloud",
    "QualityFeature",
    "SpatialIndex",
    "TrainConfig",
    "build_spatial_index",
    "confusion_counts",
    "evaluate",
    "farthest_point_sample",
    "gmm_density",
    "gmm_fit",
    "intervene_predict",
    "knn_query",
    "quality_vector",
    "report",
    "train",
]
