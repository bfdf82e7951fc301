"""Lung-cancer screening pipeline on CT volumes.

Stages: ingest (DICOM / desk format) -> quality control -> histogram
fingerprint deduplication -> nodule detection and spatial-pyramid pooling ->
gradient-boosted trees -> evaluation metrics. Each stage is a plain module;
``lungscreen.cli`` wires them into a batch command line.
"""
from .encode import NoduleRecord, detect_nodules, make_phantom, pseudo3d_slice, synthetic_detector
from .fingerprint import Fingerprinter, find_overlaps, fingerprint, fingerprint_mse
from .gbdt import GradientBoostedTreesClassifier, TrainConfig, load_model, predict, save_model, train
from .ingest import load_volume, parse_desk_volume, parse_dicom_series
from .metrics import EvalReport, PredictionSet, auc, auprc, delong_test, log_loss, threshold_sweep
from .pyramid import PyramidPooler, default_scheme, mask_single, pool
from .qc import QcPolicy, qc_gate
from .volume import CtVolume, Extent, SphereSpec

__version__ = "0.1.0"

__all__ = [
    "CtVolume",
    "EvalReport",
    "Extent",
    "Fingerprinter",
    "GradientBoostedTreesClassifier",
    "NoduleRecord",
    "PredictionSet",
    "PyramidPooler",
    "QcPolicy",
    "SphereSpec",
    "TrainConfig",
    "auc",
    "auprc",
    "default_scheme",
    "delong_test",
    "detect_nodules",
    "find_overlaps",
    "fingerprint",
    "fingerprint_mse",
    "load_model",
    "load_volume",
    "log_loss",
    "make_phantom",
    "mask_single",
    "parse_desk_volume",
    "parse_dicom_series",
    "pool",
    "predict",
    "pseudo3d_slice",
    "qc_gate",
    "save_model",
    "synthetic_detector",
    "threshold_sweep",
    "train",
]
