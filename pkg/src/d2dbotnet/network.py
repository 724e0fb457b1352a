"""Degree models and spatial graphs for D2D wireless IoT deployments.

Devices are points of a homogeneous Poisson point process (or real
locations read from a CSV file); two devices are linked when their
distance is at most the communication range ``r``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

EARTH_RADIUS_KM = 6371.0088

TORUS = "torus"
HARD = "hard"
BOUNDARY_MODES = (TORUS, HARD)


class LocationParseError(ValueError):
    """A location file record could not be parsed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkParams:
    """Deployment parameters.

    Attributes
    ----------
    lam : float
        Device intensity in devices/km^2.
    r : float
        Communication range in km.
    rho : float
        Probability that a transmission succeeds.
    p : float
        Fraction of devices vulnerable to the malware.
    """

    lam: float
    r: float
    rho: float = 0.95
    p: float = 0.7

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if not self.r > 0:
            raise ValueError(f"r must be > 0, got {self.r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")

    @property
    def mean_degree(self) -> float:
        return self.lam * math.pi * self.r**2


@dataclass(frozen=True)
class DegreeDistribution:
    """Probability vector over degrees ``0..k_max``.

    ``epsilon_tail`` holds the probability mass above ``k_max`` that the
    truncation dropped; it is zero for empirical distributions.
    """

    pi: np.ndarray
    mean_degree: float
    epsilon_tail: float = 0.0

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        if pi.ndim != 1 or pi.size < 2:
            raise ValueError("pi must be a vector covering at least degrees 0 and 1")
        if np.any(pi < 0):
            raise ValueError("pi must be nonnegative")
        total = pi.sum() + self.epsilon_tail
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"pi plus tail must sum to 1, got {total!r}")
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)

    @property
    def k_max(self) -> int:
        return self.pi.size - 1

    @property
    def degrees(self) -> np.ndarray:
        """Degrees ``1..k_max`` (the ones the mean-field system tracks)."""
        return np.arange(1, self.k_max + 1)

    @property
    def pk(self) -> np.ndarray:
        """``pi_k`` for ``k = 1..k_max``."""
        return self.pi[1:]

    @property
    def support_mean(self) -> float:
        """Sum of ``k * pi_k`` over the truncated support."""
        return float(np.dot(self.degrees, self.pk))

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "pi_k"])
            for k, v in enumerate(self.pi):
                w.writerow([k, repr(float(v))])


def poisson_degree_distribution(
    params: NetworkParams, epsilon: float = 1e-5, k_max: int | None = None
) -> DegreeDistribution:
    """Poisson degree pmf with mean ``lam * pi * r^2``, truncated.

    The truncation degree is the smallest ``k_max >= 1`` with
    ``P[K > k_max] <= epsilon``.  Passing ``k_max`` explicitly bypasses the
    search.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    m = params.mean_degree
    if k_max is None:
        k_max = 1
        while stats.poisson.sf(k_max, m) > epsilon:
            k_max += 1
    elif k_max < 1:
        raise ValueError("k_max must be >= 1")
    ks = np.arange(k_max + 1)
    pi = stats.poisson.pmf(ks, m)
    return DegreeDistribution(pi=pi, mean_degree=m, epsilon_tail=float(stats.poisson.sf(k_max, m)))


@dataclass
class SpatialGraph:
    positions: np.ndarray
    adjacency: list
    region: tuple
    boundary_mode: str = HARD
    r: float = 0.0
    _edges: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.adjacency)

    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    def edges(self) -> np.ndarray:
        """Edge array of shape (m, 2) with ``i < j``, lexicographically sorted."""
        if self._edges is None:
            rows = [(i, j) for i, nb in enumerate(self.adjacency) for j in nb if i < j]
            self._edges = np.array(rows, dtype=np.int64).reshape(-1, 2)
        return self._edges

    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Compressed neighbour lists ``(indptr, indices)``."""
        deg = self.degrees()
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(deg, out=indptr[1:])
        if self.n:
            indices = np.concatenate([np.asarray(a, dtype=np.int64) for a in self.adjacency])
        else:
            indices = np.zeros(0, dtype=np.int64)
        return indptr, indices.astype(np.int64)

    def to_json(self, path) -> None:
        doc = {
            "positions": [[float(x), float(y)] for x, y in self.positions],
            "edges": [[int(i), int(j)] for i, j in self.edges()],
            "region": [float(v) for v in self.region],
            "boundary_mode": self.boundary_mode,
            "r": float(self.r),
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def from_json(cls, path) -> "SpatialGraph":
        doc = json.loads(Path(path).read_text())
        pos = np.asarray(doc["positions"], dtype=float).reshape(-1, 2)
        edges = np.asarray(doc["edges"], dtype=np.int64).reshape(-1, 2)
        return _from_edges(pos, edges, tuple(doc.get("region", (0.0, 0.0))),
                           doc.get("boundary_mode", HARD), float(doc.get("r", 0.0)))


def _from_edges(positions, edges, region, boundary_mode, r) -> SpatialGraph:
    n = len(positions)
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(int(j))
        adj[j].append(int(i))
    adjacency = [np.array(sorted(a), dtype=np.int64) for a in adj]
    return SpatialGraph(positions, adjacency, region, boundary_mode, r)


def build_graph(positions, r: float, region=None, boundary_mode: str = HARD) -> SpatialGraph:
    """Range-``r`` disc graph over ``positions``.

    With ``boundary_mode="torus"`` distances wrap around a ``region`` of
    size ``(width, height)`` anchored at the origin.
    """
    if boundary_mode not in BOUNDARY_MODES:
        raise ValueError(f"boundary_mode must be one of {BOUNDARY_MODES}")
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    if region is None:
        span = pos.max(axis=0) - pos.min(axis=0) if len(pos) else np.zeros(2)
        region = (float(span[0]), float(span[1]))
    if boundary_mode == TORUS:
        w, h = region
        if r * 2 >= min(w, h):
            raise ValueError("torus region must be wider than twice the range")
        tree = cKDTree(np.mod(pos, [w, h]), boxsize=[w, h])
    else:
        tree = cKDTree(pos)
    pairs = tree.query_pairs(r, output_type="ndarray")
    if len(pairs):
        pairs = np.sort(pairs, axis=1)
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    return _from_edges(pos, pairs, tuple(float(v) for v in region), boundary_mode, r)


def sample_ppp_graph(
    params: NetworkParams,
    region: Sequence[float] = (1.0, 1.0),
    seed: int = 0,
    boundary_mode: str = TORUS,
) -> SpatialGraph:
    """Draw a PPP deployment on a ``width x height`` km rectangle."""
    w, h = float(region[0]), float(region[1])
    if not w * h > 0:
        raise ValueError("region area must be positive")
    rng = np.random.default_rng(seed)
    n = rng.poisson(params.lam * w * h)
    pos = rng.uniform(0.0, 1.0, size=(n, 2)) * [w, h]
    return build_graph(pos, params.r, (w, h), boundary_mode)


def read_locations(csv_source, lonlat: bool | None = None) -> np.ndarray:
    """Parse a location CSV into planar km coordinates.

    The header decides the unit: ``x,y`` means planar km, ``lon,lat`` means
    degrees (projected equirectangularly about the centroid).  ``lonlat``
    forces one interpretation regardless of the header names.
    """
    with open(csv_source, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip().lower() for c in next(reader)]
        except StopIteration:
            raise DegenerateInputError("location file is empty") from None
        if header[:2] == ["lon", "lat"]:
            is_lonlat = True
        elif header[:2] == ["x", "y"]:
            is_lonlat = False
        else:
            raise LocationParseError(1, f"expected header 'x,y' or 'lon,lat', got {','.join(header)}")
        if lonlat is not None:
            is_lonlat = lonlat
        pts = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise LocationParseError(line, "expected two coordinate fields")
            try:
                a, b = float(row[0]), float(row[1])
            except ValueError:
                raise LocationParseError(line, f"non-numeric coordinate in {row!r}") from None
            if not (math.isfinite(a) and math.isfinite(b)):
                raise LocationParseError(line, "non-finite coordinate")
            pts.append((a, b))
    if len(pts) < 2:
        raise DegenerateInputError(f"need at least 2 nodes, got {len(pts)}")
    pts = np.array(pts, dtype=float)
    if is_lonlat:
        lon0, lat0 = pts.mean(axis=0)
        k = math.pi / 180.0 * EARTH_RADIUS_KM
        pts = np.column_stack(
            [(pts[:, 0] - lon0) * k * math.cos(math.radians(lat0)), (pts[:, 1] - lat0) * k]
        )
    return pts - pts.min(axis=0)


def ingest_locations(csv_source, r: float, lonlat: bool | None = None) -> SpatialGraph:
    """Read device locations and connect them with a hard-boundary disc graph."""
    pts = read_locations(csv_source, lonlat=lonlat)
    return build_graph(pts, r, boundary_mode=HARD)


def empirical_degree_distribution(graph: SpatialGraph) -> DegreeDistribution:
    if graph.n == 0:
        raise ValueError("graph has no nodes")
    deg = graph.degrees()
    counts = np.bincount(deg, minlength=2)
    return DegreeDistribution(pi=counts / graph.n, mean_degree=float(deg.mean()))
