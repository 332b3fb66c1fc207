"""Semi-supervised meta-learning at desk scale.

Two-stage training: unsupervised meta-learning on pseudo-labeled,
augmentation-generated episodes, then supervised meta-learning warm-started
from the transferred parameters. Ships its own reverse-mode autodiff engine
(with exact second-order gradients), seeded augmentation pipelines, episode
samplers, MAML and relation-network meta-learners, and a flat-config CLI.
"""

__version__ = "0.1.0"
