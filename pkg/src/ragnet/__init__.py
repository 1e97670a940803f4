"""RAGNet: two-stage single image reflection removal with reflection-aware guidance.

A self-contained NCHW tensor library with reverse-mode autodiff, the two-stage
reflection-removal networks (reflection estimator G_R, guided transmission
estimator G_T with RAG blocks and mask-renormalized partial convolutions),
the five-term training objective, synthetic data generation, a desk-scale
trainer with bit-exact checkpointing, and evaluation metrics.
"""

__version__ = "0.1.0"
