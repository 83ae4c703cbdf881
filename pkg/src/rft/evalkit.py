"""Matching and evaluation: mutual-NN matches, repeatability and matching
accuracy under ground-truth warps, pose errors and localization success
rates, plus the text file formats they travel in."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .extract import FeatureSet
from .homography import Homography, warp_points

log = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))  # (meters, degrees)


@dataclass
class MatchSet:
    """Mutual nearest-neighbor matches: a partial bijection."""

    pairs: np.ndarray  # (N, 2) int indices into the two feature sets
    distances: np.ndarray  # (N,) descriptor distances

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if len(self.pairs) != len(self.distances):
            raise ValueError("pairs/distances length mismatch")
        for side in (0, 1):
            idx = self.pairs[:, side]
            if len(np.unique(idx)) != len(idx):
                raise ValueError("match set duplicates an index; not a partial bijection")

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class PoseRecord:
    """World-to-camera pose: x_cam = R(q) x_world + t."""

    name: str
    q: np.ndarray  # (w, x, y, z) unit quaternion
    t: np.ndarray  # meters

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-6:
            raise ValueError(f"quaternion of '{self.name}' is not unit length")

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)

    @property
    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.t


@dataclass
class RetrievalList:
    """query name -> ordered database names to match against."""

    entries: dict[str, list[str]]

    def __post_init__(self):
        for q, names in self.entries.items():
            if len(names) < 1:
                raise ValueError(f"retrieval list for '{q}' is empty")

    def save(self, path) -> None:
        lines = [" ".join([q] + names) for q, names in sorted(self.entries.items())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "RetrievalList":
        entries = {}
        for line in Path(path).read_text().splitlines():
            parts = line.split()
            if parts:
                entries[parts[0]] = parts[1:]
        return cls(entries=entries)


@dataclass
class SuccessRates:
    """Percent of queries localized within each (meters, degrees) threshold."""

    rates: tuple[float, float, float]

    def __post_init__(self):
        r = tuple(float(v) for v in self.rates)
        if any(not 0.0 <= v <= 100.0 for v in r):
            raise ValueError("success rates must be percentages")
        if not (r[0] <= r[1] + 1e-9 and r[1] <= r[2] + 1e-9):
            raise ValueError("success rates must be non-decreasing across thresholds")
        self.rates = r


def quat_to_rot(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(r) -> np.ndarray:
    """Rotation matrix -> (w, x, y, z), largest-pivot construction."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    choices = [tr, r[0, 0], r[1, 1], r[2, 2]]
    i = int(np.argmax(choices))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s,
                      (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2])
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s,
                      0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2])
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def mutual_nn(desc_a: np.ndarray, desc_b: np.ndarray) -> MatchSet:
    """Keep (i, j) iff j is i's nearest neighbor and i is j's (Euclidean)."""
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return MatchSet(pairs=np.zeros((0, 2), np.int64), distances=np.zeros(0))
    d2 = np.maximum(
        (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T), 0.0
    )
    nn_ab = d2.argmin(axis=1)
    nn_ba = d2.argmin(axis=0)
    ia = np.arange(a.shape[0])
    mutual = nn_ba[nn_ab] == ia
    pairs = np.stack([ia[mutual], nn_ab[mutual]], axis=1)
    dists = np.linalg.norm(a[pairs[:, 0]] - b[pairs[:, 1]], axis=1)
    return MatchSet(pairs=pairs, distances=dists)


def _keypoint_xy(features) -> np.ndarray:
    if isinstance(features, FeatureSet):
        return features.keypoints[:, :2].astype(np.float64)
    return np.asarray(features, dtype=np.float64).reshape(-1, 2)


def repeatability_at(features_a, features_b, H_ab: Homography, eps_px: float) -> float:
    """Fraction of keypoints with a one-to-one partner within eps pixels.

    A keypoints are warped into B's frame; assignment is greedy by
    ascending distance with each B keypoint used at most once; normalized
    by min(|A|, |B|). Empty inputs score 0 with a warning.
    """
    if eps_px <= 0:
        raise ValueError("eps_px must be > 0")
    a = _keypoint_xy(features_a)
    b = _keypoint_xy(features_b)
    if len(a) == 0 or len(b) == 0:
        log.warning("repeatability over empty keypoint set")
        return 0.0
    wa = warp_points(a, H_ab)
    d = np.linalg.norm(wa[:, None, :] - b[None, :, :], axis=2)
    ii, jj = np.nonzero(d <= eps_px)
    order = np.argsort(d[ii, jj], kind="stable")
    used_a, used_b = set(), set()
    matched = 0
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            matched += 1
    return matched / min(len(a), len(b))


def mma_at(match_set: MatchSet, kps_a, kps_b, H_ab: Homography, eps_px: float) -> float:
    """Fraction of matches whose B keypoint lies within eps of the warped A."""
    if len(match_set) == 0:
        log.warning("matching accuracy over empty match set")
        return 0.0
    a = _keypoint_xy(kps_a)[match_set.pairs[:, 0]]
    b = _keypoint_xy(kps_b)[match_set.pairs[:, 1]]
    err = np.linalg.norm(warp_points(a, H_ab) - b, axis=1)
    return float((err <= eps_px).mean())


def pose_error(est: PoseRecord, gt: PoseRecord) -> tuple[float, float]:
    """(meters between camera centers, degrees between orientations)."""
    for rec in (est, gt):
        if abs(np.linalg.norm(rec.q) - 1.0) > 1e-3:
            raise ValueError(f"non-unit quaternion in pose '{rec.name}'")
    meters = float(np.linalg.norm(est.camera_center - gt.camera_center))
    dot = min(1.0, abs(float(np.dot(est.q, gt.q))))
    degrees = float(np.degrees(2.0 * np.arccos(dot)))
    return meters, degrees


def success_rates(errors) -> SuccessRates:
    """Percent of (meters, degrees) entries inside each threshold pair.

    Failed localizations are expected as (inf, inf) entries.
    """
    errs = list(errors)
    if not errs:
        raise ValueError("success_rates needs at least one error entry")
    rates = []
    for tm, td in SUCCESS_THRESHOLDS:
        ok = sum(1 for m, d in errs if m <= tm and d <= td)
        rates.append(100.0 * ok / len(errs))
    return SuccessRates(rates=tuple(rates))


def save_poses(path, records: list[PoseRecord]) -> None:
    """One line per pose: `name qw qx qy qz tx ty tz` (world-to-camera)."""
    lines = []
    for r in records:
        vals = " ".join(f"{v:.12g}" for v in np.concatenate([r.q, r.t]))
        lines.append(f"{r.name} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path) -> list[PoseRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        name, vals = parts[0], [float(v) for v in parts[1:]]
        if len(vals) != 7:
            raise ValueError(f"bad pose line for '{name}': expected 7 numbers")
        records.append(PoseRecord(name=name, q=np.array(vals[:4]), t=np.array(vals[4:])))
    return records


def write_success_csv(path, rows: list[tuple[str, SuccessRates]]) -> None:
    lines = ["config,threshold1,threshold2,threshold3"]
    for name, sr in rows:
        lines.append(f"{name},{sr.rates[0]:.10g},{sr.rates[1]:.10g},{sr.rates[2]:.10g}")
    Path(path).write_text("\n".join(lines) + "\n")


def format_success_table(rows: list[tuple[str, SuccessRates]]) -> str:
    header = ["config".ljust(24)] + [
        f"({tm}m,{td:g}deg)".rjust(14) for tm, td in SUCCESS_THRESHOLDS
    ]
    out = ["".join(header), "-" * (24 + 14 * 3)]
    for name, sr in rows:
        out.append(name.ljust(24) + "".join(f"{v:14.1f}" for v in sr.rates))
    return "\n".join(out)
