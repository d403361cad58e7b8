"""Desk-scale federated multimodal learning lab.

Pure-numpy simulation of cross-client multimodal heterogeneity: scenario
constructors over feature manifests, a toy multimodal classifier with
low-rank adapter exchange, adaptive server optimizers, an adaptive
layer-masked proximal regularizer, rank-based evaluation metrics, and an
instruction-record exporter for external fine-tuning pipelines.
"""

__version__ = "0.1.0"
