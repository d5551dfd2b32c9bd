"""Audio-visual emotion representation learning, desk scale.

Two-stage pipeline: masked reconstruction plus in-batch contrastive
alignment over a shared transformer, followed by text knowledge
injection from caption embeddings through lightweight adapters.
"""

__version__ = "0.1.0"
