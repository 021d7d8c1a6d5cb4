"""Seeded synthetic traffic worlds and the per-agent cell-evidence observation model."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    RotatedBox,
    SectorPartition,
    box_corners,
    intersection_area,
    sector_of,
    sector_of_point,
)
from .grid import GridSpec

# Minimum edge-to-edge clearance enforced between placed vehicles. Large enough
# that 1 m cell footprints of distinct vehicles are never 8-adjacent, so the
# decoder cannot merge two vehicles into one cluster.
PLACEMENT_MARGIN = 3.0
_MAX_ATTEMPTS = 10_000

VEHICLE_LENGTH_RANGE = (3.5, 5.5)
VEHICLE_WIDTH_RANGE = (1.6, 2.2)


class PlacementExhausted(RuntimeError):
    """Raised when rejection sampling cannot place a vehicle (overdense config)."""


class UnknownAgent(KeyError):
    """Raised for an agent index outside [0, n_collaborators]."""


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    area_side: float = 64.0
    n_collaborators: int = 4
    n_vehicles: int = 12
    density_profile: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    sensor_range: float = 28.0
    occlusion_enabled: bool = True
    dropout_prob: float = 0.0

    def __post_init__(self):
        if not (-(2**63) <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in 64 bits")
        if self.area_side <= 0:
            raise ValueError("area_side must be positive")
        if self.n_collaborators < 0:
            raise ValueError("n_collaborators must be >= 0")
        if self.n_vehicles < 1:
            raise ValueError("n_vehicles must be >= 1")
        if len(self.density_profile) < 1 or any(w < 0 for w in self.density_profile) \
                or not any(w > 0 for w in self.density_profile):
            raise ValueError("density_profile needs non-negative weights, not all zero")
        if not (0.0 <= self.dropout_prob <= 1.0):
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.sensor_range <= 0:
            raise ValueError("sensor_range must be positive")


@dataclass(frozen=True)
class ScenarioWorld:
    config: ScenarioConfig
    grid: GridSpec
    partition: SectorPartition
    ego_pose: tuple[float, float, float]
    collaborator_poses: tuple[tuple[float, float, float], ...]
    rsu_pose: tuple[float, float, float]
    vehicles: tuple[RotatedBox, ...]
    per_agent_observations: np.ndarray = field(repr=False)  # (N, H, W) uint8
    vehicle_cells: tuple[tuple[tuple[int, int], ...], ...] = field(repr=False)

    @property
    def n_agents(self) -> int:
        return 1 + len(self.collaborator_poses)

    def agent_position(self, agent_index: int) -> tuple[float, float]:
        if agent_index == 0:
            return self.ego_pose[0], self.ego_pose[1]
        if 1 <= agent_index < self.n_agents:
            pose = self.collaborator_poses[agent_index - 1]
            return pose[0], pose[1]
        raise UnknownAgent(agent_index)


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer; stable across platforms for uint64 inputs."""
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def cell_dropout_uniforms(seed: int, agent_index: int, h: int, w: int) -> np.ndarray:
    """Deterministic per-(seed, agent, cell) uniforms in [0, 1).

    Keyed per cell, not per query, so enlarging the sensor range or re-asking
    never flips an individual cell's dropout decision.
    """
    rows, cols = np.meshgrid(np.arange(h, dtype=np.uint64),
                             np.arange(w, dtype=np.uint64), indexing="ij")
    key = _mix64(np.full((h, w), np.uint64(seed % (2**64)), dtype=np.uint64))
    key = _mix64(key ^ np.uint64(agent_index + 1))
    key = _mix64(key ^ (rows << np.uint64(20)) ^ cols)
    return (key >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _footprint_cells(box: RotatedBox, grid: GridSpec) -> list[tuple[int, int]]:
    """Cells whose squares overlap the box with positive area."""
    xs = [p[0] for p in box_corners(box)]
    ys = [p[1] for p in box_corners(box)]
    r0, c0 = grid.cell_of(min(xs), min(ys))
    r1, c1 = grid.cell_of(max(xs), max(ys))
    cells = []
    for r in range(max(r0, 0), min(r1, grid.h - 1) + 1):
        for c in range(max(c0, 0), min(c1, grid.w - 1) + 1):
            cx, cy = grid.center_of(r, c)
            cell_box = RotatedBox(1.0, cx, cy, grid.cell_size, grid.cell_size, 1.0, 0.0)
            if intersection_area(box, cell_box) > 1e-12:
                cells.append((r, c))
    return cells


def _segments_blocked(pos: tuple[float, float], targets: np.ndarray,
                      box: RotatedBox, eps: float = 1e-9) -> np.ndarray:
    """Vectorized open-segment-vs-box test for segments pos -> targets (K, 2)."""
    c, s = box.cos_a, box.sin_a
    px = (pos[0] - box.cx) * c + (pos[1] - box.cy) * s
    py = -(pos[0] - box.cx) * s + (pos[1] - box.cy) * c
    qx = (targets[:, 0] - box.cx) * c + (targets[:, 1] - box.cy) * s
    qy = -(targets[:, 0] - box.cx) * s + (targets[:, 1] - box.cy) * c
    t0 = np.zeros(len(targets))
    t1 = np.ones(len(targets))
    alive = np.ones(len(targets), dtype=bool)
    for start, deltas, half in ((px, qx - px, 0.5 * box.length),
                                (py, qy - py, 0.5 * box.width)):
        parallel = deltas == 0.0
        alive &= ~(parallel & (abs(start) >= half))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-half - start) / deltas
            tb = (half - start) / deltas
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        t0 = np.where(parallel, t0, np.maximum(t0, lo))
        t1 = np.where(parallel, t1, np.minimum(t1, hi))
        alive &= parallel | (t0 < t1)
    return alive & ((t1 - t0) > eps) & (t1 > eps) & (t0 < 1.0 - eps)


def _inflated(box: RotatedBox, margin: float) -> RotatedBox:
    return RotatedBox(box.confidence, box.cx, box.cy, box.length + margin,
                      box.width + margin, box.cos_a, box.sin_a)


def generate(config: ScenarioConfig, grid: GridSpec | None = None) -> ScenarioWorld:
    """Build a deterministic world from the config.

    The ego sits at the area center heading +x; collaborators are placed
    uniformly at distance [10, area_side/2] from it; vehicles are rejection
    sampled under the per-sector density profile with a separation margin.
    """
    if grid is None:
        grid = GridSpec.for_area(config.area_side)
    rng = np.random.default_rng(np.uint64(config.seed % (2**64)))
    side = config.area_side
    ego = (side / 2.0, side / 2.0, 0.0)
    partition = SectorPartition.uniform(len(config.density_profile),
                                        frame_origin=(ego[0], ego[1]),
                                        frame_heading=ego[2])

    collaborators = []
    r_lo = min(10.0, side / 2.0)
    for _ in range(config.n_collaborators):
        ang = rng.uniform(0.0, 2.0 * math.pi)
        radius = rng.uniform(r_lo, side / 2.0)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        collaborators.append((ego[0] + radius * math.cos(ang),
                              ego[1] + radius * math.sin(ang), heading))

    agent_points = [(ego[0], ego[1])] + [(p[0], p[1]) for p in collaborators]
    max_weight = max(config.density_profile)
    vehicles: list[RotatedBox] = []
    for _ in range(config.n_vehicles):
        for attempt in range(_MAX_ATTEMPTS):
            x = rng.uniform(0.0, side)
            y = rng.uniform(0.0, side)
            roll = rng.uniform()
            length = rng.uniform(*VEHICLE_LENGTH_RANGE)
            width = rng.uniform(*VEHICLE_WIDTH_RANGE)
            ang = rng.uniform(0.0, 2.0 * math.pi)
            weight = config.density_profile[sector_of_point(x, y, partition)]
            if roll * max_weight >= weight:
                continue
            cand = RotatedBox.from_angle(1.0, x, y, length, width, ang)
            # Whole footprint inside the area: a box clipped by the edge leaves
            # an undetectable sliver that pollutes every method's precision.
            if any(not (0.0 <= px <= side and 0.0 <= py <= side)
                   for px, py in box_corners(cand)):
                continue
            inflated = _inflated(cand, PLACEMENT_MARGIN)
            if any(intersection_area(inflated, _inflated(v, PLACEMENT_MARGIN)) > 0.0
                   for v in vehicles):
                continue
            if any(intersection_area(inflated,
                                     RotatedBox(1.0, ax, ay, 1.0, 1.0, 1.0, 0.0)) > 0.0
                   for ax, ay in agent_points):
                continue
            vehicles.append(cand)
            break
        else:
            raise PlacementExhausted(
                f"could not place vehicle {len(vehicles)} after {_MAX_ATTEMPTS} attempts")

    vehicle_cells = tuple(tuple(_footprint_cells(v, grid)) for v in vehicles)
    n_agents = 1 + config.n_collaborators
    observations = np.zeros((n_agents, grid.h, grid.w), dtype=np.uint8)
    for agent in range(n_agents):
        pos = agent_points[agent]
        observations[agent] = _observe_grid(config, grid, vehicles, vehicle_cells,
                                            pos, agent)

    return ScenarioWorld(config=config, grid=grid, partition=partition, ego_pose=ego,
                         collaborator_poses=tuple(collaborators), rsu_pose=ego,
                         vehicles=tuple(vehicles),
                         per_agent_observations=observations,
                         vehicle_cells=vehicle_cells)


def _observe_grid(config: ScenarioConfig, grid: GridSpec, vehicles, vehicle_cells,
                  pos: tuple[float, float], agent_index: int) -> np.ndarray:
    evidence = np.zeros((grid.h, grid.w), dtype=np.uint8)
    range_sq = config.sensor_range ** 2
    for vi, cells in enumerate(vehicle_cells):
        if not cells:
            continue
        centers = np.array([grid.center_of(r, c) for r, c in cells])
        visible = ((centers[:, 0] - pos[0]) ** 2 + (centers[:, 1] - pos[1]) ** 2) <= range_sq
        if config.occlusion_enabled and visible.any():
            for wi, blocker in enumerate(vehicles):
                if wi == vi or not visible.any():
                    continue
                visible &= ~_segments_blocked(pos, centers, blocker)
        for (r, c), ok in zip(cells, visible):
            if ok:
                evidence[r, c] = 1
    if config.dropout_prob > 0.0:
        keep = cell_dropout_uniforms(config.seed, agent_index, grid.h, grid.w) \
            >= config.dropout_prob
        evidence = (evidence.astype(bool) & keep).astype(np.uint8)
    return evidence


def observe(world: ScenarioWorld, agent_index: int) -> np.ndarray:
    """Cell-evidence grid of one agent (0 = ego). Reproducible; read-only view."""
    if not (0 <= agent_index < world.n_agents):
        raise UnknownAgent(agent_index)
    out = world.per_agent_observations[agent_index]
    out = out.view()
    out.setflags(write=False)
    return out


def rsu_observe(world: ScenarioWorld,
                partition: SectorPartition | None = None) -> np.ndarray:
    """Per-sector ground-truth vehicle counts from the unoccluded RSU view."""
    part = partition if partition is not None else world.partition
    counts = np.zeros(part.n_dir, dtype=np.int64)
    for v in world.vehicles:
        counts[sector_of(v, part)] += 1
    return counts


def scene_to_dict(world: ScenarioWorld) -> dict:
    """JSON-friendly scene dump (observations stored as sparse positive cells)."""
    positives = [
        [int(a), int(r), int(c)]
        for a in range(world.n_agents)
        for r, c in zip(*np.nonzero(world.per_agent_observations[a]))
    ]
    cfg = world.config
    return {
        "config": {
            "seed": int(cfg.seed), "area_side": cfg.area_side,
            "n_collaborators": cfg.n_collaborators, "n_vehicles": cfg.n_vehicles,
            "density_profile": list(cfg.density_profile),
            "sensor_range": cfg.sensor_range,
            "occlusion_enabled": cfg.occlusion_enabled,
            "dropout_prob": cfg.dropout_prob,
        },
        "grid": {"h": world.grid.h, "w": world.grid.w,
                 "cell_size": world.grid.cell_size,
                 "origin": [world.grid.origin_x, world.grid.origin_y]},
        "ego_pose": list(world.ego_pose),
        "collaborator_poses": [list(p) for p in world.collaborator_poses],
        "rsu_pose": list(world.rsu_pose),
        "vehicles": [list(v.as_tuple()) for v in world.vehicles],
        "observations": positives,
    }


def export_scene(world: ScenarioWorld, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(scene_to_dict(world), sort_keys=True, indent=2) + "\n",
        encoding="utf-8")
