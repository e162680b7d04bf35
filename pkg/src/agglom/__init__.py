"""Primary particle size analysis of agglomerates on synthetic TEM-like images.

Subpackages cover the full two-route workflow: image synthesis with exact
ground truth, distortion analysis, feed-forward network training with scaled
conjugate gradient, the measurement pipeline (count classification followed by
per-class area regression), and the classical watershed / ultimate erosion /
circular Hough baselines.
"""

__version__ = "0.1.0"
