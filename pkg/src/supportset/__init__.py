"""Video-text representation learning with a support-set captioning bottleneck.

Synthetic-corpus laboratory for a joint objective combining a hinge-based
triplet contrastive loss with an autoregressive captioning loss whose
conditioning is a learned mixture over other samples' video embeddings.
"""

__version__ = "0.1.0"
