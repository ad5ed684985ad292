"""Ideal pinhole camera: pixel <-> normalized image-plane conversions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def normalize(self, uv):
        """Pixels -> normalized image-plane coordinates."""
        uv = np.asarray(uv, dtype=float)
        return np.stack(
            [(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy],
            axis=-1,
        )

    def denormalize(self, xy):
        """Normalized coordinates -> pixels."""
        xy = np.asarray(xy, dtype=float)
        return np.stack(
            [xy[..., 0] * self.fx + self.cx, xy[..., 1] * self.fy + self.cy], axis=-1
        )

    def project(self, point_cam):
        """Project a camera-frame 3D point to pixels. Requires depth > 0."""
        p = np.asarray(point_cam, dtype=float)
        return np.array(
            [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
        )

    def in_bounds(self, uv) -> bool:
        return 0.0 <= uv[0] < self.width and 0.0 <= uv[1] < self.height

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)


DEFAULT_CAMERA = CameraModel(fx=460.0, fy=460.0, cx=320.0, cy=240.0, width=640, height=480)
