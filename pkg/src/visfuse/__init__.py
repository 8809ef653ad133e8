"""Sentence visualization and fusion for retrieval-augmented language understanding.

A desk-scale pipeline: a joint visual-semantic embedding retrieves an image for
each sentence, stored visual features are fused into a pre-trained text model
through gated attention, and the combined model is trained in three stages
(retrieval embedding, fusion-only, end-to-end fine-tune).

Submodules are imported on demand: ``from visfuse import autodiff``, etc.
"""

__version__ = "0.1.0"
