"""Two-stage pediatric respiratory-sound classification pipeline.

Event-level audio clips are embedded by a pluggable encoder, classified by
task-specific heads, stacked through out-of-fold probabilities into boosted
meta-learners, and aggregated into gated patient-level predictions.
"""

__version__ = "0.1.0"
