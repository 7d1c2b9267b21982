"""Deterministic desk-scale driving scenarios with a scripted expert.

Everything is expressed in the ego frame: x forward, y to the left, metres.
A scenario is a pure function of its seed (Philox counter-based stream), so
any dataset is reproducible from a seed range.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tokenizer as tk
from .errors import DataFormatError, SchemaError
from .model import Batch
from .tokenizer import EgoState, SymbolVocab

GENERATOR_VERSION = 1

CRUISE_SPEED = 8.0  # m/s
MAX_DECEL = 2.0  # m/s^2, also the acceleration limit
RASTER_SIZE = 16
CELL = 2.0  # m per raster cell
RASTER_X0 = -3.0  # x of the first row's lower edge
RASTER_Y0 = -17.0  # y of the first column's lower edge

COMMANDS = ("follow", "turn_left", "turn_right", "stop")
HAZARDS = ("none", "lead_vehicle", "stop_line")

GOAL_SYMBOLS = ("GOAL_REACH", "GOAL_LEFT", "GOAL_AHEAD", "GOAL_RIGHT", "GOAL_NEAR", "GOAL_FAR")
COMMAND_SYMBOLS = {
    "follow": "CMD_FOLLOW",
    "turn_left": "CMD_LEFT",
    "turn_right": "CMD_RIGHT",
    "stop": "CMD_STOP",
}
HAZARD_SYMBOLS = {"none": "SYM_CLEAR", "lead_vehicle": "SYM_LEAD", "stop_line": "SYM_STOPLINE"}
MANEUVER_SYMBOLS = {
    "follow": "SYM_FOLLOW",
    "turn_left": "SYM_LEFT",
    "turn_right": "SYM_RIGHT",
    "stop": "SYM_STOP",
}
INTENT_SYMBOLS = {"none": "SYM_CRUISE", "lead_vehicle": "SYM_SLOW", "stop_line": "SYM_HALT"}


def default_vocab(size: int = 64) -> SymbolVocab:
    symbols = (
        list(GOAL_SYMBOLS)
        + list(COMMAND_SYMBOLS.values())
        + list(HAZARD_SYMBOLS.values())
        + list(MANEUVER_SYMBOLS.values())
        + list(INTENT_SYMBOLS.values())
    )
    return SymbolVocab(symbols, size=size)


VOCAB = default_vocab()


@dataclass(frozen=True)
class Scenario:
    seed: int
    lane: str  # straight | left | right
    radius: float  # metres; inf for a straight lane
    target_s: float  # arc length of the target point along the lane
    command: str
    hazard: str
    hazard_distance: float | None  # metres along the lane
    lead_speed: float | None  # m/s, only for a lead vehicle
    ego: EgoState

    @property
    def scenario_class(self) -> str:
        return self.command


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def sample_scenario(seed: int) -> Scenario:
    """Draw one scenario; 50% follow, 20% each turn, 10% stop."""
    rng = _rng(seed)
    u = rng.random()
    if u < 0.5:
        command = "follow"
    elif u < 0.7:
        command = "turn_left"
    elif u < 0.9:
        command = "turn_right"
    else:
        command = "stop"

    if command == "follow":
        if rng.random() < 0.6:
            lane, radius = "straight", math.inf
        else:
            lane, radius = ("left" if rng.random() < 0.5 else "right"), float(rng.uniform(25.0, 40.0))
    elif command == "stop":
        lane, radius = "straight", math.inf
    else:
        lane, radius = ("left" if command == "turn_left" else "right"), float(rng.uniform(8.0, 25.0))

    if command == "stop":
        hazard = "stop_line"
    else:
        hazard = "lead_vehicle" if rng.random() < (0.4 if command == "follow" else 0.3) else "none"
    hazard_distance = float(rng.uniform(4.0, 20.0)) if hazard != "none" else None
    lead_speed = float(rng.uniform(2.0, 6.0)) if hazard == "lead_vehicle" else None

    v = float(rng.uniform(6.0, 10.0))
    a = float(rng.uniform(-0.5, 0.5))
    yaw = float(rng.uniform(-math.pi, math.pi))
    turn = {"straight": 0.0, "left": 1.0, "right": -1.0}[lane]
    yaw_rate = turn * v / radius if lane != "straight" else 0.0
    target_s = float(rng.uniform(18.0, 25.0))
    return Scenario(
        seed=int(seed),
        lane=lane,
        radius=radius,
        target_s=target_s,
        command=command,
        hazard=hazard,
        hazard_distance=hazard_distance,
        lead_speed=lead_speed,
        ego=EgoState(v, a, yaw, yaw_rate),
    )


def lane_point(sc: Scenario, s, lateral=0.0) -> np.ndarray:
    """Ego-frame point at arc length ``s`` along the lane, offset ``lateral`` to the left."""
    s, lat = np.broadcast_arrays(np.asarray(s, dtype=np.float64), np.asarray(lateral, dtype=np.float64))
    if sc.lane == "straight":
        return np.stack([s, lat], axis=-1)
    sign = 1.0 if sc.lane == "left" else -1.0
    r = sc.radius
    phi = s / r
    # left normal of the arc at phi is (-sign*sin phi, cos phi)
    x = r * np.sin(phi) - lat * sign * np.sin(phi)
    y = sign * r * (1.0 - np.cos(phi)) + lat * np.cos(phi)
    return np.stack([x, y], axis=-1)


def expert_path(sc: Scenario) -> np.ndarray:
    """Centerline samples at arc lengths 1..20 m, shape (20, 2)."""
    return lane_point(sc, np.arange(1, tk.N_WAYPOINTS + 1, dtype=np.float64))


def target_point(sc: Scenario) -> np.ndarray:
    return lane_point(sc, sc.target_s)


def _ramp(v0: float, target: float, t_hold: float, t: np.ndarray) -> np.ndarray:
    dt = np.maximum(t - t_hold, 0.0)
    if v0 >= target:
        return np.maximum(v0 - MAX_DECEL * dt, target)
    return np.minimum(v0 + MAX_DECEL * dt, target)


def expert_speed(sc: Scenario) -> np.ndarray:
    """Speeds at t = 1..10 s: hold, then change at 2 m/s^2 toward the hazard speed."""
    t = np.arange(1, tk.N_SPEEDS + 1, dtype=np.float64)
    v0 = sc.ego.v
    if sc.hazard == "none":
        return _ramp(v0, CRUISE_SPEED, 0.0, t)
    goal = 0.0 if sc.hazard == "stop_line" else min(sc.lead_speed, v0)
    braking = (v0 * v0 - goal * goal) / (2.0 * MAX_DECEL)
    t_hold = max(0.0, (sc.hazard_distance - braking) / v0) if v0 > 0 else 0.0
    return _ramp(v0, goal, t_hold, t)


def expert_instruction(sc: Scenario, vocab: SymbolVocab = VOCAB) -> list[int]:
    return vocab.encode(
        [HAZARD_SYMBOLS[sc.hazard], MANEUVER_SYMBOLS[sc.command], INTENT_SYMBOLS[sc.hazard]]
    ) + [tk.EOS]


def goal_symbols(sc: Scenario, vocab: SymbolVocab = VOCAB) -> list[int]:
    p = target_point(sc)
    bearing = math.atan2(p[1], p[0])
    side = "GOAL_LEFT" if bearing > 0.35 else "GOAL_RIGHT" if bearing < -0.35 else "GOAL_AHEAD"
    dist = "GOAL_NEAR" if float(np.hypot(*p)) < 20.0 else "GOAL_FAR"
    return vocab.encode(["GOAL_REACH", side, dist])


def _cell(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = np.floor((points[..., 0] - RASTER_X0) / CELL).astype(int)
    cols = np.floor((points[..., 1] - RASTER_Y0) / CELL).astype(int)
    ok = (rows >= 0) & (rows < RASTER_SIZE) & (cols >= 0) & (cols < RASTER_SIZE)
    return rows[ok], cols[ok]


def rasterize(sc: Scenario) -> np.ndarray:
    """16x16 occupancy grid (rows = x forward): lane 0.5, hazard 1.0, ego 0.25."""
    grid = np.zeros((RASTER_SIZE, RASTER_SIZE))
    s = np.arange(0.0, 32.0, 0.25)
    for lat in (-1.5, 0.0, 1.5):
        r, c = _cell(lane_point(sc, s, lat))
        grid[r, c] = 0.5
    if sc.hazard == "lead_vehicle":
        hs = np.arange(sc.hazard_distance, sc.hazard_distance + 4.0, 0.25)
        for lat in (-0.5, 0.5):
            r, c = _cell(lane_point(sc, hs, lat))
            grid[r, c] = 1.0
    elif sc.hazard == "stop_line":
        lats = np.arange(-2.5, 2.51, 0.25)
        r, c = _cell(lane_point(sc, np.full(lats.shape, sc.hazard_distance), lats))
        grid[r, c] = 1.0
    r, c = _cell(np.zeros((1, 2)))
    grid[r, c] = 0.25
    return grid


# ----------------------------------------------------------------------------
# samples and files
# ----------------------------------------------------------------------------


@dataclass(eq=False)
class DrivingSample:
    seed: int
    scenario_class: str
    raster: np.ndarray  # (16, 16)
    goal_ids: list[int]
    command_id: int
    target: np.ndarray  # (2,) metres
    ego: EgoState
    path: np.ndarray  # (20, 2) metres
    speed: np.ndarray  # (10,) m/s
    instruction: list[int]  # symbols then EOS

    def __eq__(self, other) -> bool:
        if not isinstance(other, DrivingSample):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.scenario_class == other.scenario_class
            and self.goal_ids == other.goal_ids
            and self.command_id == other.command_id
            and self.ego == other.ego
            and self.instruction == other.instruction
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("raster", "target", "path", "speed")
            )
        )


FIELDS = (
    "seed", "scenario_class", "raster", "goal_ids", "command_id",
    "target", "ego", "path", "speed", "instruction",
)


def make_sample(seed: int, vocab: SymbolVocab = VOCAB) -> DrivingSample:
    sc = sample_scenario(seed)
    return DrivingSample(
        seed=sc.seed,
        scenario_class=sc.scenario_class,
        raster=rasterize(sc),
        goal_ids=goal_symbols(sc, vocab),
        command_id=vocab.id(COMMAND_SYMBOLS[sc.command]),
        target=target_point(sc),
        ego=sc.ego,
        path=expert_path(sc),
        speed=expert_speed(sc),
        instruction=expert_instruction(sc, vocab),
    )


def generate(seed_start: int, count: int, vocab: SymbolVocab = VOCAB) -> list[DrivingSample]:
    return [make_sample(seed_start + i, vocab) for i in range(count)]


def sample_to_record(s: DrivingSample) -> dict:
    return {
        "seed": s.seed,
        "scenario_class": s.scenario_class,
        "raster": s.raster.tolist(),
        "goal_ids": list(s.goal_ids),
        "command_id": s.command_id,
        "target": s.target.tolist(),
        "ego": {"v": s.ego.v, "a": s.ego.a, "yaw": s.ego.yaw, "yaw_rate": s.ego.yaw_rate},
        "path": s.path.tolist(),
        "speed": s.speed.tolist(),
        "instruction": list(s.instruction),
    }


def _array(rec: dict, key: str, shape: tuple[int, ...]) -> np.ndarray:
    try:
        arr = np.array(rec[key], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"field {key!r} is not numeric: {exc}") from None
    if arr.shape != shape:
        raise SchemaError(f"field {key!r} has shape {arr.shape}, expected {shape}")
    return arr


def record_to_sample(rec: dict) -> DrivingSample:
    if not isinstance(rec, dict):
        raise SchemaError("record is not an object")
    for key in FIELDS:
        if key not in rec:
            raise SchemaError(f"missing field {key!r}")
    ego = rec["ego"]
    for key in ("v", "a", "yaw", "yaw_rate"):
        if not isinstance(ego, dict) or key not in ego:
            raise SchemaError(f"missing field 'ego.{key}'")
    return DrivingSample(
        seed=int(rec["seed"]),
        scenario_class=str(rec["scenario_class"]),
        raster=_array(rec, "raster", (RASTER_SIZE, RASTER_SIZE)),
        goal_ids=[int(i) for i in rec["goal_ids"]],
        command_id=int(rec["command_id"]),
        target=_array(rec, "target", (2,)),
        ego=EgoState(float(ego["v"]), float(ego["a"]), float(ego["yaw"]), float(ego["yaw_rate"])),
        path=_array(rec, "path", (tk.N_WAYPOINTS, 2)),
        speed=_array(rec, "speed", (tk.N_SPEEDS,)),
        instruction=[int(i) for i in rec["instruction"]],
    )


def write_dataset(samples: Iterable[DrivingSample], path: str | Path) -> None:
    """One JSON object per line; floats use shortest round-trip decimals."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), separators=(",", ":")))
            fh.write("\n")


def read_dataset(path: str | Path) -> list[DrivingSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: line {lineno}: malformed record ({exc.msg})") from None
            try:
                out.append(record_to_sample(rec))
            except SchemaError as exc:
                raise SchemaError(f"{path}: line {lineno}: {exc}") from None
    return out


# ----------------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------------


def layout_key(s: DrivingSample) -> tuple[int, int]:
    return len(s.goal_ids), len(s.instruction)


def collate(samples: Sequence[DrivingSample], index: Sequence[int] | None = None) -> Batch:
    """Stack samples that share a token layout into one batch."""
    keys = {layout_key(s) for s in samples}
    if len(keys) != 1:
        raise DataFormatError(f"cannot batch samples with different layouts: {sorted(keys)}")
    cmd = np.array([[s.command_id, tk.BOS] + list(s.instruction[:-1]) for s in samples], dtype=np.int64)
    return Batch(
        goal_ids=np.array([s.goal_ids for s in samples], dtype=np.int64).reshape(len(samples), -1),
        command_ids=cmd,
        raster=np.stack([s.raster for s in samples]),
        target=np.stack([s.target for s in samples]),
        ego=np.stack([s.ego.features() for s in samples]),
        path=np.stack([s.path for s in samples]),
        speed=np.stack([s.speed for s in samples]),
        text_targets=np.array([s.instruction for s in samples], dtype=np.int64),
        index=np.asarray(index if index is not None else np.arange(len(samples)), dtype=np.int64),
    )


def batches(
    samples: Sequence[DrivingSample],
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> list[Batch]:
    """Split into same-layout batches; shuffled when ``rng`` is given."""
    order = np.arange(len(samples))
    if rng is not None:
        order = rng.permutation(len(samples))
    buckets: dict[tuple[int, int], list[int]] = {}
    for i in order:
        buckets.setdefault(layout_key(samples[i]), []).append(int(i))
    out = []
    for key in sorted(buckets):
        idx = buckets[key]
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo : lo + batch_size]
            out.append(collate([samples[i] for i in chunk], chunk))
    if rng is not None:
        out = [out[i] for i in rng.permutation(len(out))]
    return out
