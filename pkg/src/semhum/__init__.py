"""semhum: joint appearance/geometry/part-label fields for an articulated
subject, learned from posed images with noisy pseudo-labels."""

__version__ = "0.1.0"
