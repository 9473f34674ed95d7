"""Cell layouts, user drops, and wrap-around distance geometry."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidParameterError, InvalidStateError

HEX_GRID = "hex_grid"
CELL_EDGE_PAIR = "cell_edge_pair"

# Fraction of the BS separation used as the user-drop disc radius around the
# midpoint of a cell-edge pair deployment.
CELL_EDGE_PAIR_DROP_RADIUS = 0.05

# Annulus (relative to ISD) for the cell_edge_band drop policy.
CELL_EDGE_BAND = (0.4, 0.5)


@dataclass(frozen=True)
class NetworkTopology:
    """BS/user geometry of one deployment.

    Positions are in meters.  ``serving_cell[u]`` is the index of the BS that
    serves user ``u``.  ``wrap_shifts`` holds the translation images used by
    the wrap-around distance metric (always includes the zero shift).
    """

    bs_positions: np.ndarray                      # (L, 2)
    isd: float
    tiers: int
    wrap_around: bool
    deployment_kind: str
    user_positions: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 2)))  # (U, 2)
    serving_cell: np.ndarray = field(
        default_factory=lambda: np.zeros(0, dtype=int))
    wrap_shifts: np.ndarray = field(
        default_factory=lambda: np.zeros((1, 2)))  # (n_images, 2)

    @property
    def num_cells(self) -> int:
        return self.bs_positions.shape[0]

    @property
    def num_users(self) -> int:
        return self.user_positions.shape[0]

    def users_of(self, cell: int) -> np.ndarray:
        """Indices of the users served by ``cell``."""
        return np.nonzero(self.serving_cell == cell)[0]

    def to_dict(self) -> dict:
        return {
            "bs_positions": self.bs_positions.tolist(),
            "user_positions": self.user_positions.tolist(),
            "serving_cell": self.serving_cell.tolist(),
            "isd": self.isd,
            "tiers": self.tiers,
            "wrap_around": self.wrap_around,
            "deployment_kind": self.deployment_kind,
        }

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkTopology":
        topo = cls(
            bs_positions=np.asarray(data["bs_positions"], dtype=float).reshape(-1, 2),
            isd=float(data["isd"]),
            tiers=int(data["tiers"]),
            wrap_around=bool(data["wrap_around"]),
            deployment_kind=str(data["deployment_kind"]),
            user_positions=np.asarray(data["user_positions"], dtype=float).reshape(-1, 2),
            serving_cell=np.asarray(data["serving_cell"], dtype=int),
        )
        shifts = _wrap_shifts(topo.tiers, topo.isd) if topo.wrap_around \
            else np.zeros((1, 2))
        return replace(topo, wrap_shifts=shifts)

    @classmethod
    def from_json(cls, text: str) -> "NetworkTopology":
        return cls.from_dict(json.loads(text))


def _hex_axes() -> tuple[np.ndarray, np.ndarray]:
    """Lattice basis vectors (unit ISD)."""
    a1 = np.array([1.0, 0.0])
    a2 = np.array([0.5, math.sqrt(3.0) / 2.0])
    return a1, a2


def _wrap_shifts(tiers: int, isd: float) -> np.ndarray:
    """Translation images of a ``tiers``-tier hex cluster (7-image wrap).

    The cluster of 1 + 3t(t+1) cells tiles the plane under the lattice vector
    (t+1)·a1 + t·a2 and its 60-degree rotations.
    """
    if tiers < 1:
        return np.zeros((1, 2))
    a1, a2 = _hex_axes()
    base = isd * ((tiers + 1) * a1 + tiers * a2)
    half = []
    for k in range(3):
        ang = k * math.pi / 3.0
        rot = np.array([[math.cos(ang), -math.sin(ang)],
                        [math.sin(ang), math.cos(ang)]])
        half.append(rot @ base)
    # Exact negation closure keeps the wrap metric symmetric to the bit.
    shifts = [np.zeros(2)] + half + [-s for s in half]
    return np.array(shifts)


def generate_hex_grid(tiers: int, isd: float) -> NetworkTopology:
    """Hexagonal grid of 1 + 3·tiers·(tiers+1) BSs with the given inter-site
    distance.  Wrap-around is enabled for tiers >= 1."""
    if tiers < 0:
        raise InvalidParameterError(f"tiers must be >= 0, got {tiers}")
    if isd <= 0:
        raise InvalidParameterError(f"isd must be positive, got {isd}")
    a1, a2 = _hex_axes()
    positions = []
    for q in range(-tiers, tiers + 1):
        for r in range(-tiers, tiers + 1):
            if abs(q + r) <= tiers:
                positions.append(isd * (q * a1 + r * a2))
    bs = np.array(positions) if positions else np.zeros((1, 2))
    wrap = tiers >= 1
    return NetworkTopology(
        bs_positions=bs,
        isd=float(isd),
        tiers=tiers,
        wrap_around=wrap,
        deployment_kind=HEX_GRID,
        wrap_shifts=_wrap_shifts(tiers, isd),
    )


def generate_cell_edge_pair(separation: float) -> NetworkTopology:
    """Two BSs at (+-separation/2, 0); users are later dropped around the
    midpoint so both BSs are received with comparable average power."""
    if separation <= 0:
        raise InvalidParameterError(
            f"separation must be positive, got {separation}")
    bs = np.array([[-separation / 2.0, 0.0], [separation / 2.0, 0.0]])
    return NetworkTopology(
        bs_positions=bs,
        isd=float(separation),
        tiers=0,
        wrap_around=False,
        deployment_kind=CELL_EDGE_PAIR,
    )


def wrap_distance(a, b, topology: NetworkTopology) -> float:
    """Minimum distance between ``a`` and ``b`` over the cluster shift images.

    Falls back to the plain Euclidean distance for non-wrap deployments
    (the shift set is then just the zero translation).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    diff = a - b - topology.wrap_shifts
    return float(np.min(np.linalg.norm(diff, axis=1)))


def pairwise_distances(points_a: np.ndarray, points_b: np.ndarray,
                       topology: NetworkTopology) -> np.ndarray:
    """All wrap-around distances between two point sets, shape (A, B)."""
    pa = np.asarray(points_a, dtype=float)[:, None, None, :]
    pb = np.asarray(points_b, dtype=float)[None, :, None, :]
    shifts = topology.wrap_shifts[None, None, :, :]
    return np.linalg.norm(pa - pb - shifts, axis=-1).min(axis=-1)


def nearest_bs(topology: NetworkTopology, point) -> int:
    """Index of the BS nearest to ``point`` under the wrap metric."""
    d = pairwise_distances(np.asarray(point)[None, :], topology.bs_positions,
                           topology)
    return int(np.argmin(d[0]))


def _in_hex_cell(local: np.ndarray, isd: float) -> bool:
    """Whether a BS-relative point lies in the lattice Voronoi hexagon."""
    half = isd / 2.0
    for ang in (0.0, math.pi / 3.0, 2.0 * math.pi / 3.0):
        axis = np.array([math.cos(ang), math.sin(ang)])
        if abs(float(local @ axis)) > half:
            return False
    return True


def _sample_in_hex(rng: np.random.Generator, isd: float) -> np.ndarray:
    # Rejection sampling from the bounding box of the hexagon
    # (circumradius isd/sqrt(3)).
    radius = isd / math.sqrt(3.0)
    while True:
        p = rng.uniform(-radius, radius, size=2)
        if _in_hex_cell(p, isd):
            return p


def _sample_in_annulus(rng: np.random.Generator, r_inner: float,
                       r_outer: float) -> np.ndarray:
    # Area-uniform radius, uniform angle.
    u = rng.uniform()
    r = math.sqrt(u * (r_outer ** 2 - r_inner ** 2) + r_inner ** 2)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return np.array([r * math.cos(theta), r * math.sin(theta)])


def drop_users(topology: NetworkTopology, users_per_cell: int, seed: int,
               policy: str = "uniform_in_cell") -> NetworkTopology:
    """Return a copy of ``topology`` with ``users_per_cell`` users per cell.

    Policies:
      * ``uniform_in_cell`` -- uniform over the Voronoi hexagon (hex grid) or
        over a small disc around the midpoint (cell-edge pair).
      * ``cell_edge_band`` -- annulus [0.4, 0.5]*isd around the serving BS
        (hex grid); same midpoint disc for the cell-edge pair.
    """
    if topology.num_cells == 0:
        raise InvalidStateError("topology has no base stations")
    if users_per_cell < 1:
        raise InvalidParameterError(
            f"users_per_cell must be >= 1, got {users_per_cell}")
    if policy not in ("uniform_in_cell", "cell_edge_band"):
        raise InvalidParameterError(f"unknown drop policy {policy!r}")

    rng = np.random.default_rng(seed)
    positions = []
    serving = []
    for cell in range(topology.num_cells):
        center = topology.bs_positions[cell]
        for _ in range(users_per_cell):
            if topology.deployment_kind == CELL_EDGE_PAIR:
                # Both cells' users share the midpoint region by design.
                local = _sample_in_annulus(
                    rng, 0.0, CELL_EDGE_PAIR_DROP_RADIUS * topology.isd)
                positions.append(local)  # midpoint of the pair is the origin
            elif policy == "cell_edge_band":
                local = _sample_in_annulus(rng,
                                           CELL_EDGE_BAND[0] * topology.isd,
                                           CELL_EDGE_BAND[1] * topology.isd)
                positions.append(center + local)
            else:
                positions.append(center + _sample_in_hex(rng, topology.isd))
            serving.append(cell)
    return replace(topology,
                   user_positions=np.array(positions),
                   serving_cell=np.array(serving, dtype=int))
