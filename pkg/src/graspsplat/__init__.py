"""graspsplat: differentiable Gaussian-splat reconstruction of two skinned
hands and a rigid object from monocular frame sequences."""

__version__ = "0.1.0"
