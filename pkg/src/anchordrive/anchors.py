"""Expert trajectory records and the k-means anchor vocabulary.

Trajectories are T fixed-interval future waypoints in the ego frame.
Clustering runs on the flattened waypoint coordinates with Euclidean
distance, k-means++ seeding, and farthest-point repair for clusters that
empty out; the returned anchors are sorted lexicographically so a given
seed always yields the same file bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .belief import ACTION_NAMES, EgoStatus, LateralAction, action_from_name

__all__ = ["T_WAYPOINTS", "WAYPOINT_DT", "Trajectory", "DatasetRecord",
           "TrajectoryDataset", "AnchorSet", "DatasetError", "load_dataset",
           "save_dataset", "kmeans_cluster", "nearest_anchor", "ade",
           "save_anchors", "load_anchors"]

T_WAYPOINTS = 5
WAYPOINT_DT = 0.5


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """T future waypoints (meters, ego frame at prediction time)."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.shape != (T_WAYPOINTS, 2):
            raise DatasetError(f"trajectory needs shape ({T_WAYPOINTS}, 2), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise DatasetError("trajectory has non-finite coordinates")
        object.__setattr__(self, "points", p)


@dataclass(frozen=True)
class DatasetRecord:
    trajectory: Trajectory
    action: LateralAction
    ego: EgoStatus
    scenario: str
    frame: int


@dataclass
class TrajectoryDataset:
    records: list[DatasetRecord]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def stacked(self) -> np.ndarray:
        """All trajectories as one (M, T, 2) array."""
        return np.stack([r.trajectory.points for r in self.records])


def _record_to_json(r: DatasetRecord) -> dict:
    return {
        "trajectory": r.trajectory.points.tolist(),
        "action": ACTION_NAMES[int(r.action)],
        "speed": r.ego.speed,
        "yaw": r.ego.yaw,
        "scenario": r.scenario,
        "frame": r.frame,
    }


def _record_from_json(obj: dict) -> DatasetRecord:
    return DatasetRecord(
        trajectory=Trajectory(np.array(obj["trajectory"], dtype=np.float64)),
        action=action_from_name(obj["action"]),
        ego=EgoStatus(speed=float(obj["speed"]), yaw=float(obj["yaw"])),
        scenario=str(obj["scenario"]),
        frame=int(obj["frame"]),
    )


def save_dataset(path: str | Path, dataset: TrajectoryDataset) -> None:
    """Write header + one record per line as JSON lines."""
    path = Path(path)
    lines = [json.dumps({"kind": "trajectory-dataset", "meta": dataset.meta},
                        sort_keys=True)]
    lines.extend(json.dumps(_record_to_json(r), sort_keys=True) for r in dataset.records)
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> TrajectoryDataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no dataset file at {path}")
    records: list[DatasetRecord] = []
    meta: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetError(f"{path}:{lineno}: not valid JSON ({err})") from None
            if lineno == 1:
                if not isinstance(obj, dict) or obj.get("kind") != "trajectory-dataset":
                    raise DatasetError(f"{path}:1: missing trajectory-dataset header")
                meta = dict(obj.get("meta", {}))
                continue
            try:
                records.append(_record_from_json(obj))
            except (KeyError, TypeError, ValueError) as err:
                raise DatasetError(f"{path}:{lineno}: bad record ({err})") from None
    return TrajectoryDataset(records=records, meta=meta)


# ---- anchors ------------------------------------------------------------


@dataclass
class AnchorSet:
    """The clustered trajectory vocabulary, shape (N_a, T, 2), meters."""

    anchors: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64)
        if a.ndim != 3 or a.shape[1:] != (T_WAYPOINTS, 2):
            raise DatasetError(f"anchors need shape (k, {T_WAYPOINTS}, 2), got {a.shape}")
        flat = a.reshape(a.shape[0], -1)
        if len({tuple(row) for row in flat}) != a.shape[0]:
            raise DatasetError("anchor set contains duplicate trajectories")
        self.anchors = a

    def __len__(self) -> int:
        return self.anchors.shape[0]


def ade(a: np.ndarray, b: np.ndarray) -> float:
    """Average per-waypoint Euclidean displacement between two (T, 2) paths."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(np.hypot(d[..., 0], d[..., 1])))


def _kmeans_pp_init(flat: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread the initial centroids with D^2 sampling."""
    n = flat.shape[0]
    centroids = np.empty((k, flat.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = flat[first]
    d2 = np.sum((flat - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = flat[idx]
        d2 = np.minimum(d2, np.sum((flat - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans_cluster(trajectories: np.ndarray, k: int, seed: int,
                   max_iters: int = 100, tol: float = 1e-6) -> AnchorSet:
    """Cluster (M, T, 2) trajectories into k anchors.

    Runs Lloyd iterations until the largest centroid move drops below
    ``tol``. A cluster that loses all members seizes the point currently
    farthest from its own centroid. Mean squared assignment distance is
    checked to be non-increasing every iteration.
    """
    trajs = np.asarray(trajectories, dtype=np.float64)
    if trajs.ndim != 3 or trajs.shape[1:] != (T_WAYPOINTS, 2):
        raise DatasetError(f"expected (M, {T_WAYPOINTS}, 2) trajectories, got {trajs.shape}")
    m = trajs.shape[0]
    if k < 1:
        raise DatasetError(f"k must be positive, got {k}")
    if k > m:
        raise DatasetError(f"k={k} exceeds the {m} available trajectories")
    flat = trajs.reshape(m, -1)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(flat, k, rng)
    prev_inertia = np.inf
    iterations = 0
    for iterations in range(1, max_iters + 1):
        d2 = np.sum((flat[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)
        nearest2 = d2[np.arange(m), assign]
        inertia = float(nearest2.mean())
        if inertia > prev_inertia + 1e-12:
            raise AssertionError(
                f"k-means inertia increased: {prev_inertia} -> {inertia}"
            )
        prev_inertia = inertia
        new_centroids = centroids.copy()
        for j in range(k):
            members = assign == j
            if np.any(members):
                new_centroids[j] = flat[members].mean(axis=0)
        for j in range(k):
            if not np.any(assign == j):
                worst = int(np.argmax(nearest2))
                new_centroids[j] = flat[worst]
                nearest2[worst] = 0.0
        shift = float(np.max(np.sqrt(np.sum((new_centroids - centroids) ** 2, axis=1))))
        centroids = new_centroids
        if shift < tol:
            break
    order = sorted(range(k), key=lambda i: tuple(centroids[i]))
    centroids = centroids[order]
    d2 = np.sum((flat[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    final_inertia = float(d2.min(axis=1).mean())
    return AnchorSet(
        anchors=centroids.reshape(k, T_WAYPOINTS, 2),
        meta={"k": k, "seed": seed, "iterations": iterations, "inertia": final_inertia},
    )


def nearest_anchor(anchor_set: AnchorSet, trajectory: Trajectory) -> tuple[int, float]:
    """Index of the anchor with minimal ADE to the trajectory; ties go to
    the lowest index."""
    diffs = anchor_set.anchors - trajectory.points[None, :, :]
    ades = np.mean(np.hypot(diffs[..., 0], diffs[..., 1]), axis=1)
    idx = int(np.argmin(ades))
    return idx, float(ades[idx])


def save_anchors(path: str | Path, anchor_set: AnchorSet) -> None:
    payload = {
        "kind": "anchor-set",
        "meta": anchor_set.meta,
        "anchors": anchor_set.anchors.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_anchors(path: str | Path) -> AnchorSet:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no anchor file at {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise DatasetError(f"{path}: not valid JSON ({err})") from None
    if payload.get("kind") != "anchor-set":
        raise DatasetError(f"{path}: not an anchor-set file")
    return AnchorSet(anchors=np.array(payload["anchors"], dtype=np.float64),
                     meta=payload.get("meta", {}))
