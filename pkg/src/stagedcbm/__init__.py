"""Staged concept-bottleneck models with human intervention.

Three independently trained stages map an image to a class through two
inspectable bottlenecks: a segmentation stage, a property-concept stage,
and an interaction-aware classifier.  Ships with a synthetic "geo-scan"
benchmark whose labels follow from explicit rules over the concepts.
"""

__version__ = "0.1.0"
