"""Staged incremental learning engine for multi-class segmentation.

The package trains one segmentation network over a sequence of partially
labeled datasets, each annotating only the categories introduced at its
stage. Earlier knowledge is preserved through probability remapping of
the shared background, distillation against the frozen previous model,
and a prototype memory bank over the feature space.
"""

__version__ = "0.1.0"
