"""Dataset manifests, synthetic-camera generation, evaluation and reports.

Stages communicate through JSONL manifests; the synthetic-camera generator
provides the desk-scale ground truth for end-to-end validation.
"""

from .manifest import ManifestRow, load_manifest, save_manifest
from .scoring import ScoreReport, score, weighted_score, write_report
from .synthcam import SyntheticCameraSpec, generate_synthetic_dataset, simulate_camera

__all__ = [
    "ManifestRow", "load_manifest", "save_manifest",
    "ScoreReport", "score", "weighted_score", "write_report",
    "SyntheticCameraSpec", "generate_synthetic_dataset", "simulate_camera",
]
