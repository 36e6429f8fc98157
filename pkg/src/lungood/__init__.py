"""Density-based anomaly detection for diffuse lung disease on 3D CT patches.

The pipeline: extract lung patches from (synthetic or real) CT volumes, embed
them, fit a generative density model on embeddings of normal patches from
healthy subjects only, score every patch by negative log-likelihood, and
aggregate patch scores to a patient-level decision.
"""

__version__ = "0.1.0"
