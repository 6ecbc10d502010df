"""Planar geometry shared by the scenario generator, the simulator, and
the metrics: polyline arc-length bookkeeping, frame transforms, and
oriented-rectangle overlap."""

from __future__ import annotations

import numpy as np

__all__ = ["Polyline", "world_to_ego", "ego_to_world", "rect_corners",
           "rects_overlap"]


class Polyline:
    """Piecewise-linear path with cumulative arc-length indexing."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError(f"polyline needs (N>=2, 2) points, got {pts.shape}")
        self.points = pts
        seg = np.diff(pts, axis=0)
        self._seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(self._seg_len <= 0):
            raise ValueError("polyline has a zero-length segment")
        self._seg_dir = seg / self._seg_len[:, None]
        self._cum = np.concatenate([[0.0], np.cumsum(self._seg_len)])

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def project(self, point) -> tuple[float, float]:
        """Project a point onto the path.

        Returns (arc position of the closest point, unsigned distance).
        """
        p = np.asarray(point, dtype=np.float64)
        rel = p[None, :] - self.points[:-1]
        t = np.einsum("ij,ij->i", rel, self._seg_dir)
        t = np.clip(t, 0.0, self._seg_len)
        closest = self.points[:-1] + t[:, None] * self._seg_dir
        d = np.hypot(*(p[None, :] - closest).T)
        i = int(np.argmin(d))
        return float(self._cum[i] + t[i]), float(d[i])

    def point_at(self, s: float) -> np.ndarray:
        """Point at arc position s, clamped to the path's extent."""
        s = float(np.clip(s, 0.0, self.length))
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        return self.points[i] + (s - self._cum[i]) * self._seg_dir[i]

    def tangent_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.length))
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(max(i, 0), len(self._seg_len) - 1)
        return self._seg_dir[i].copy()

    def heading_at(self, s: float) -> float:
        d = self.tangent_at(s)
        return float(np.arctan2(d[1], d[0]))

    def signed_offset(self, point) -> float:
        """Lateral offset of a point, positive to the left of travel."""
        s, d = self.project(point)
        i = int(np.searchsorted(self._cum, min(s, self.length - 1e-12), side="right") - 1)
        i = min(max(i, 0), len(self._seg_len) - 1)
        rel = np.asarray(point, dtype=np.float64) - self.points[i]
        cross = self._seg_dir[i, 0] * rel[1] - self._seg_dir[i, 1] * rel[0]
        return float(np.sign(cross) * d)


def world_to_ego(points: np.ndarray, pose) -> np.ndarray:
    """Express world points in the frame of pose = (x, y, yaw);
    +x ahead of the vehicle, +y to its left."""
    x, y, yaw = pose
    pts = np.asarray(points, dtype=np.float64) - np.array([x, y])
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, s], [-s, c]])
    return pts @ rot.T


def ego_to_world(points: np.ndarray, pose) -> np.ndarray:
    x, y, yaw = pose
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return np.asarray(points, dtype=np.float64) @ rot.T + np.array([x, y])


def rect_corners(cx: float, cy: float, yaw: float, length: float, width: float) -> np.ndarray:
    """Corners of an oriented rectangle, counterclockwise."""
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis intersection test for two convex quads (4, 2)."""
    for quad in (a, b):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
