"""Neuro-symbolic risk prediction with narrative explanations.

Subpackages cover the full desk-scale pipeline: ontology graph handling,
concept embeddings, synthetic cohort generation, risk predictors, Shapley
attribution, retrieval-grounded narratives, and the explanation-quality
metric suite.
"""

__version__ = "0.1.0"
