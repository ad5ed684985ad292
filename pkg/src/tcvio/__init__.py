"""tcvio: sliding-window visual-inertial odometry with online calibration of
the constant time offset between camera and IMU timestamps.

The offset is estimated inside the window bundle adjustment by letting each
feature observation slide along its image-plane velocity, then compensated by
shifting subsequent camera timestamps so the remaining offset converges to
zero.
"""

__version__ = "0.1.0"

from .se3 import Pose, Rotation, right_jacobian_so3, so3_exp, so3_log

__all__ = [
    "Pose",
    "Rotation",
    "right_jacobian_so3",
    "so3_exp",
    "so3_log",
    "__version__",
]
