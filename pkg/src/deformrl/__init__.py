"""deformrl: goal-conditioned rearranging of simulated deformable objects.

Three trainable pieces and one environment:

* ``autodiff`` — a small reverse-mode engine over numpy arrays,
* ``detector`` — a spatial-softmax keypoint detector estimator,
* ``graphnet`` + ``agent`` — a self/cross-attention graph Q-network
  trained with DQN to emit pick-and-place values over keypoint pairs,
* ``sim`` — a 2-D position-based-dynamics rope/ring/cloth environment
  with eight goal-randomized task families.
"""

from .keypoints import KeypointSet

__all__ = ["KeypointSet"]
__version__ = "0.1.0"
