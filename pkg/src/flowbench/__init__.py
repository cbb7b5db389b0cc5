"""Multi-dataset LiDAR scene-flow unification, augmentation and evaluation toolkit."""

__version__ = "0.1.0"
