import numpy as np
import pytest

from anchordrive.anchors import (AnchorSet, DatasetError, DatasetRecord,
                                 Trajectory, TrajectoryDataset, ade,
                                 kmeans_cluster, load_anchors, load_dataset,
                                 nearest_anchor, save_anchors, save_dataset)
from anchordrive.belief import EgoStatus, LateralAction


def _traj(offset_y=0.0, scale=1.0, rng=None, jitter=0.0):
    xs = scale * np.arange(1.0, 6.0)
    ys = np.full(5, offset_y)
    pts = np.stack([xs, ys], axis=1)
    if jitter and rng is not None:
        pts = pts + rng.normal(0.0, jitter, size=pts.shape)
    return pts


def _record(i=0, offset_y=0.0):
    return DatasetRecord(
        trajectory=Trajectory(_traj(offset_y)),
        action=LateralAction.LANE_FOLLOW,
        ego=EgoStatus(speed=7.0, yaw=0.0),
        scenario=f"straight_{i:05d}",
        frame=i,
    )


# ---- dataset io ---------------------------------------------------------


def test_dataset_round_trip(tmp_path) -> None:
    ds = TrajectoryDataset(records=[_record(0), _record(1, 0.4)],
                           meta={"config": {"seed": 3}})
    path = tmp_path / "d.jsonl"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.meta == {"config": {"seed": 3}}
    assert len(back) == 2
    assert np.array_equal(back.records[1].trajectory.points, ds.records[1].trajectory.points)
    assert back.records[0].action == LateralAction.LANE_FOLLOW
    assert back.records[0].ego.speed == 7.0


def test_dataset_save_is_deterministic(tmp_path) -> None:
    ds = TrajectoryDataset(records=[_record(i) for i in range(5)], meta={"seed": 1})
    save_dataset(tmp_path / "a.jsonl", ds)
    save_dataset(tmp_path / "b.jsonl", ds)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_load_dataset_reports_bad_line_number(tmp_path) -> None:
    path = tmp_path / "d.jsonl"
    good = TrajectoryDataset(records=[_record(0)], meta={})
    save_dataset(path, good)
    with open(path, "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(DatasetError, match=":3:"):
        load_dataset(path)


def test_load_dataset_rejects_bad_action_with_line(tmp_path) -> None:
    path = tmp_path / "d.jsonl"
    save_dataset(path, TrajectoryDataset(records=[_record(0)], meta={}))
    text = path.read_text().replace("LaneFollow", "Zigzag")
    path.write_text(text)
    with pytest.raises(DatasetError, match=":2:"):
        load_dataset(path)


def test_load_dataset_requires_header(tmp_path) -> None:
    path = tmp_path / "d.jsonl"
    path.write_text('{"trajectory": []}\n')
    with pytest.raises(DatasetError, match="header"):
        load_dataset(path)


def test_trajectory_validation() -> None:
    with pytest.raises(DatasetError):
        Trajectory(np.zeros((4, 2)))
    with pytest.raises(DatasetError):
        Trajectory(np.full((5, 2), np.nan))


# ---- ade and nearest anchor ---------------------------------------------


def test_ade_matches_hand_value() -> None:
    a = np.zeros((5, 2))
    b = np.stack([np.zeros(5), np.array([3.0, 4.0, 0.0, 0.0, 0.0])], axis=1)
    # distances 3, 4, 0, 0, 0 -> mean 1.4
    assert ade(a, b) == pytest.approx(1.4)


def test_nearest_anchor_exhaustive_scan_and_tie_break() -> None:
    rng = np.random.default_rng(0)
    anchors = AnchorSet(np.stack([_traj(y) for y in (-2.0, 0.0, 2.0, 4.0)]))
    for _ in range(50):
        probe = Trajectory(_traj(rng.uniform(-3, 5), rng=rng, jitter=0.3))
        idx, dist = nearest_anchor(anchors, probe)
        all_ades = [ade(anchors.anchors[i], probe.points) for i in range(4)]
        assert dist == pytest.approx(min(all_ades))
        assert idx == int(np.argmin(all_ades))
    # exact tie between anchors 0 and 2 resolves to the lower index
    mid = Trajectory(_traj(1.0))
    idx, _ = nearest_anchor(AnchorSet(np.stack([_traj(0.0), _traj(2.0)])), mid)
    assert idx == 0


# ---- k-means -------------------------------------------------------------


def _two_bundles(n_per=20, gap=6.0, seed=0):
    rng = np.random.default_rng(seed)
    a = np.stack([_traj(0.0, rng=rng, jitter=0.05) for _ in range(n_per)])
    b = np.stack([_traj(gap, rng=rng, jitter=0.05) for _ in range(n_per)])
    return np.concatenate([a, b]), a, b


def test_kmeans_two_bundles_recovers_means() -> None:
    trajs, a, b = _two_bundles()
    got = kmeans_cluster(trajs, k=2, seed=1)
    # brute-force oracle: best of the two possible bundle assignments
    want = np.stack([a.mean(axis=0), b.mean(axis=0)])
    order = sorted(range(2), key=lambda i: tuple(want[i].reshape(-1)))
    want = want[order]
    assert np.allclose(got.anchors, want, atol=1e-9)


def test_kmeans_k1_is_mean_trajectory() -> None:
    trajs, _, _ = _two_bundles()
    got = kmeans_cluster(trajs, k=1, seed=5)
    assert np.allclose(got.anchors[0], trajs.mean(axis=0), atol=1e-12)


def test_kmeans_is_bit_deterministic_per_seed() -> None:
    rng = np.random.default_rng(7)
    trajs = np.stack([_traj(rng.uniform(-4, 4), rng=rng, jitter=0.4) for _ in range(200)])
    a = kmeans_cluster(trajs, k=8, seed=42)
    b = kmeans_cluster(trajs, k=8, seed=42)
    assert np.array_equal(a.anchors, b.anchors)
    c = kmeans_cluster(trajs, k=8, seed=43)
    assert not np.array_equal(a.anchors, c.anchors)


def test_kmeans_own_output_is_fixed_point() -> None:
    rng = np.random.default_rng(8)
    trajs = np.stack([_traj(rng.uniform(-4, 4), rng=rng, jitter=0.5) for _ in range(100)])
    first = kmeans_cluster(trajs, k=6, seed=3)
    again = kmeans_cluster(first.anchors, k=6, seed=11)
    assert np.allclose(again.anchors, first.anchors, atol=1e-12)
    assert again.meta["inertia"] == pytest.approx(0.0, abs=1e-18)


def test_kmeans_rejects_k_larger_than_data() -> None:
    trajs, _, _ = _two_bundles(n_per=3)
    with pytest.raises(DatasetError, match="exceeds"):
        kmeans_cluster(trajs, k=7, seed=0)
    with pytest.raises(DatasetError, match="positive"):
        kmeans_cluster(trajs, k=0, seed=0)


def test_kmeans_inertia_decreases_with_more_clusters() -> None:
    rng = np.random.default_rng(9)
    trajs = np.stack([_traj(rng.uniform(-4, 4), scale=rng.uniform(0.8, 1.4),
                            rng=rng, jitter=0.3) for _ in range(150)])
    inertias = [kmeans_cluster(trajs, k=k, seed=2).meta["inertia"] for k in (1, 4, 12)]
    assert inertias[0] > inertias[1] > inertias[2]


def test_anchor_file_round_trip(tmp_path) -> None:
    trajs, _, _ = _two_bundles()
    anchors = kmeans_cluster(trajs, k=2, seed=1)
    anchors.meta["config"] = {"seed": 1}
    save_anchors(tmp_path / "a.json", anchors)
    back = load_anchors(tmp_path / "a.json")
    assert np.array_equal(back.anchors, anchors.anchors)
    assert back.meta["config"] == {"seed": 1}
    save_anchors(tmp_path / "b.json", anchors)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_anchor_set_rejects_duplicates() -> None:
    with pytest.raises(DatasetError, match="duplicate"):
        AnchorSet(np.stack([_traj(0.0), _traj(0.0)]))
