"""Template-relevance prediction for single-step retrosynthesis.

Molecules and reaction templates are encoded into a shared association
space; templates are ranked by Hopfield-style retrieval, screened with a
bit-subset substructure filter, and executed as graph rewrites.
"""

__version__ = "0.1.0"
