"""Two-stage Gleason grading on patch-grid slides.

Stage 1 turns patches into category likelihoods, stage 2 grades slides from
heatmap summaries with a kNN. Survival and inter-rater statistics evaluate
the grades against reference standards and follow-up data.
"""
from .core import (GleasonScore, GradeGroup, LabelMask, LikelihoodMap, PatternCategory,
                   SlideRecord, derive_gleason_score, grade_group_from_score)
from .finegrained import quantitative_gp_smooth, quantitative_gp_verbatim

__all__ = [
    "GleasonScore", "GradeGroup", "LabelMask", "LikelihoodMap", "PatternCategory",
    "SlideRecord", "derive_gleason_score", "grade_group_from_score",
    "quantitative_gp_smooth", "quantitative_gp_verbatim",
]
__version__ = "0.1.0"
