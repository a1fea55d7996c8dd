"""Decoupled parameter-efficient adaptation for multimodal sequential recommendation.

Frozen synthetic backbones emit per-layer pooled hidden states that are
cached to disk once; small trainable side towers with gated fusion turn the
states into item embeddings for a sequential recommender trained with an
in-batch debiased softmax loss. A cost model and a gradient-flow probe make
the full-fine-tuning / embedded-adapter / decoupled trade-offs measurable.
"""

__version__ = "0.1.0"
