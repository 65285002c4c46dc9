"""View graph, track and reconstruction containers shared by every stage.

All containers here are frozen dataclasses and their numpy payloads are made
read-only at construction, so a graph or reconstruction can be handed to
parallel workers without defensive copies.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, Pose

VISUAL = "visual"
SENSOR = "sensor"


def _frozen(a: np.ndarray, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class TwoViewEdge:
    """Epipolar geometry and matches between images i < j.

    ``rotation``/``direction`` give the relative pose x_j = R_ij x_i + t_ij
    with a unit-norm direction. ``matches`` is an (m, 2) int array of
    (keypoint index in i, keypoint index in j). ``weight`` is the surviving
    match count for visual edges; sensor edges may carry no matches at all.
    """

    i: int
    j: int
    rotation: np.ndarray
    direction: np.ndarray
    matches: np.ndarray
    weight: int
    source: str = VISUAL

    def __post_init__(self):
        if not self.i < self.j:
            raise ValueError(f"edge endpoints must satisfy i < j, got ({self.i}, {self.j})")
        if self.source not in (VISUAL, SENSOR):
            raise ValueError(f"unknown edge source {self.source!r}")
        object.__setattr__(self, "rotation", _frozen(np.asarray(self.rotation).reshape(3, 3)))
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n > 0:
            d = d / n
        object.__setattr__(self, "direction", _frozen(d))
        m = np.asarray(self.matches, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "matches", _frozen(m, dtype=np.int64))

    @property
    def key(self) -> tuple[int, int]:
        return (self.i, self.j)


@dataclass(frozen=True)
class ViewGraph:
    """Cameras keyed by image id plus two-view edges keyed by (i, j), i < j."""

    cameras: dict[int, Camera]
    edges: dict[tuple[int, int], TwoViewEdge]

    def __post_init__(self):
        for key, e in self.edges.items():
            if key != (e.i, e.j):
                raise ValueError(f"edge stored under {key} but spans ({e.i}, {e.j})")
            if e.i not in self.cameras or e.j not in self.cameras:
                raise ValueError(f"edge ({e.i}, {e.j}) references unknown image")

    def nodes(self) -> list[int]:
        return sorted(self.cameras)

    def neighbors(self, i: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)

    def adjacency(self) -> dict[int, list[tuple[int, tuple[int, int]]]]:
        """node -> list of (other endpoint, edge key)."""
        adj: dict[int, list[tuple[int, tuple[int, int]]]] = {i: [] for i in self.cameras}
        for key, e in self.edges.items():
            adj[e.i].append((e.j, key))
            adj[e.j].append((e.i, key))
        return adj

    def connected_components(self) -> list[set[int]]:
        adj = self.adjacency()
        seen: set[int] = set()
        comps = []
        for start in self.nodes():
            if start in seen:
                continue
            comp = {start}
            stack = [start]
            seen.add(start)
            while stack:
                u = stack.pop()
                for v, _ in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        comp.add(v)
                        stack.append(v)
            comps.append(comp)
        return comps

    def largest_component(self) -> set[int]:
        comps = self.connected_components()
        if not comps:
            return set()
        return max(comps, key=lambda c: (len(c), -min(c)))

    def subgraph(self, keep: set[int]) -> "ViewGraph":
        cams = {i: c for i, c in self.cameras.items() if i in keep}
        edges = {k: e for k, e in self.edges.items() if e.i in keep and e.j in keep}
        return ViewGraph(cams, edges)


def edge_key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class Track:
    """A 3D point with its observations.

    ``observations`` is a tuple of (image id, keypoint index); image ids are
    unique within a track. ``inliers`` flags which observations currently
    agree with the point; outlier observations stay listed so provenance is
    never lost.
    """

    point: np.ndarray
    observations: tuple[tuple[int, int], ...]
    inliers: np.ndarray

    def __post_init__(self):
        obs = tuple((int(a), int(b)) for a, b in self.observations)
        if len(obs) < 2:
            raise ValueError("a track needs at least two observations")
        imgs = [a for a, _ in obs]
        if len(set(imgs)) != len(imgs):
            raise ValueError("track observes the same image twice")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "point", _frozen(np.asarray(self.point).reshape(3)))
        fl = np.asarray(self.inliers, dtype=bool).reshape(len(obs))
        object.__setattr__(self, "inliers", _frozen(fl, dtype=bool))

    def inlier_count(self) -> int:
        return int(self.inliers.sum())


@dataclass(frozen=True)
class Reconstruction:
    """Registered poses plus triangulated tracks, tagged with its gauge frame."""

    poses: dict[int, Pose]
    tracks: tuple[Track, ...]
    frame: str = "global"

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        for tr in self.tracks:
            for k, (img, _) in enumerate(tr.observations):
                if tr.inliers[k] and img not in self.poses:
                    raise ValueError(f"track observes unregistered image {img} as inlier")

    def centers(self) -> dict[int, np.ndarray]:
        return {i: p.center for i, p in self.poses.items()}

    def n_points(self) -> int:
        return len(self.tracks)


@dataclass(frozen=True)
class SensorPrior:
    """Metric relative pose between consecutive frames from an external sensor.

    ``rotation``/``translation`` follow the same x_j = R x_i + t convention as
    TwoViewEdge but the translation keeps its metric length. ``dt_ms`` is the
    capture-time gap used to gate stale priors.
    """

    i: int
    j: int
    rotation: np.ndarray
    translation: np.ndarray
    dt_ms: float

    def __post_init__(self):
        if not self.i < self.j:
            raise ValueError("sensor prior endpoints must satisfy i < j")
        object.__setattr__(self, "rotation", _frozen(np.asarray(self.rotation).reshape(3, 3)))
        object.__setattr__(self, "translation", _frozen(np.asarray(self.translation).reshape(3)))


@dataclass(frozen=True)
class GlobalPoses:
    """Output of the global stage: absolute poses plus per-edge scale estimates.

    Nodes the position solver could not pin down (parallel-rigidity defects)
    are listed in ``unsolvable`` instead of being placed somewhere arbitrary.
    """

    poses: dict[int, Pose]
    edge_scales: dict[tuple[int, int], float] = field(default_factory=dict)
    unsolvable: tuple[int, ...] = ()
    objective_history: tuple[float, ...] = field(default=(), repr=False)

    def centers(self) -> dict[int, np.ndarray]:
        return {i: p.center for i, p in self.poses.items()}
