"""Structure-aware dense retrieval for legal case documents.

The package covers the full desk-scale pipeline: splitting case documents
into their canonical sections, generating synthetic structured corpora,
pre-training a bottlenecked encoder with two section decoders, contrastive
fine-tuning with mined hard negatives, lexical and dense retrieval, and
graded-relevance evaluation.
"""

__version__ = "0.1.0"
