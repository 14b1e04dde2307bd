"""Camera-model identification pipeline.

Stages: quality-scored patch extraction, first-stage 2D EMD residue
augmentation, deterministic post-processing transforms, a densely connected
convolutional feature extractor with a squeeze-excite fusion head, phased
SGD training, and weighted forensic scoring. Stages compose through JSONL
manifests; see the CLI in `camtrace.cli`.
"""

__version__ = "0.1.0"
