"""Map every input modality to embedding rows and lay them out as one sequence.

Group order is fixed: goal, image, target point, command, ego state, then the
noisy action tokens (20 path tokens followed by 10 speed tokens). Generated
instruction symbols live inside the command span, so language positions never
come after an action token.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, InputError, VocabError
from .numerics import Tensor

N_WAYPOINTS = 20
N_SPEEDS = 10
N_ACTION = N_WAYPOINTS + N_SPEEDS
TIME_EMBED_DIM = 8

# model-space scaling of physical inputs
POSITION_SCALE = 20.0  # m
SPEED_SCALE = 15.0  # m/s
ACCEL_SCALE = 5.0  # m/s^2

PAD, BOS, EOS = 0, 1, 2


class TokenType(enum.IntEnum):
    GOAL = 0
    IMAGE = 1
    TARGET_POINT = 2
    COMMAND = 3
    EGO_STATE = 4
    PATH_ACTION = 5
    SPEED_ACTION = 6


VL_TYPES = frozenset({TokenType.GOAL, TokenType.IMAGE, TokenType.COMMAND})
ACT_TYPES = frozenset(
    {TokenType.TARGET_POINT, TokenType.EGO_STATE, TokenType.PATH_ACTION, TokenType.SPEED_ACTION}
)
ACTION_TYPES = frozenset({TokenType.PATH_ACTION, TokenType.SPEED_ACTION})

GROUP_ORDER = ("goal", "image", "target", "command", "ego", "action")
_GROUP_TAG = {
    "goal": TokenType.GOAL,
    "image": TokenType.IMAGE,
    "target": TokenType.TARGET_POINT,
    "command": TokenType.COMMAND,
    "ego": TokenType.EGO_STATE,
}


@dataclass(frozen=True)
class EgoState:
    v: float  # m/s
    a: float  # m/s^2
    yaw: float  # rad
    yaw_rate: float  # rad/s

    def __post_init__(self) -> None:
        vals = (self.v, self.a, self.yaw, self.yaw_rate)
        if not all(math.isfinite(x) for x in vals):
            raise InputError(f"ego state has non-finite component: {vals}")
        if self.v < 0:
            raise InputError(f"ego speed must be non-negative, got {self.v}")

    def features(self) -> np.ndarray:
        """Normalized model input: speed, accel, (sin, cos) of yaw, yaw rate."""
        return np.array(
            [
                self.v / SPEED_SCALE,
                self.a / ACCEL_SCALE,
                math.sin(self.yaw),
                math.cos(self.yaw),
                self.yaw_rate,
            ]
        )


EGO_FEATURES = 5


class SymbolVocab:
    """Bijective symbol <-> id table. Ids 0, 1, 2 are PAD, BOS, EOS."""

    RESERVED = ("<pad>", "<bos>", "<eos>")

    def __init__(self, symbols: Sequence[str], size: int | None = None):
        table = list(self.RESERVED)
        for s in symbols:
            if s in table:
                raise VocabError(f"duplicate symbol {s!r}")
            table.append(s)
        size = len(table) if size is None else size
        if size < len(table):
            raise VocabError(f"vocabulary of {len(table)} symbols exceeds size {size}")
        self.size = size
        self._symbols = table
        self._ids = {s: i for i, s in enumerate(table)}

    def __len__(self) -> int:
        return self.size

    @property
    def symbols(self) -> list[str]:
        return list(self._symbols)

    def id(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise VocabError(f"unknown symbol {symbol!r}") from None

    def symbol(self, idx: int) -> str:
        if 0 <= idx < len(self._symbols):
            return self._symbols[idx]
        if 0 <= idx < self.size:
            return f"<unused:{idx}>"
        raise VocabError(f"token id {idx} outside vocabulary of size {self.size}")

    def encode(self, symbols: Sequence[str]) -> list[int]:
        return [self.id(s) for s in symbols]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbol(int(i)) for i in ids]

    def to_text(self) -> str:
        return f"size={self.size}\n" + "\n".join(self._symbols[len(self.RESERVED):])

    @classmethod
    def from_text(cls, text: str) -> "SymbolVocab":
        lines = text.split("\n")
        if not lines or not lines[0].startswith("size="):
            raise VocabError("vocabulary block must start with size=")
        size = int(lines[0][5:])
        return cls([ln for ln in lines[1:] if ln], size=size)

    def __eq__(self, other) -> bool:
        return isinstance(other, SymbolVocab) and (self.size, self._symbols) == (
            other.size,
            other._symbols,
        )


@dataclass
class InterleavedSequence:
    embeddings: Tensor  # (..., N, d)
    tags: list[TokenType]
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tags)

    def group(self, name: str) -> Tensor:
        lo, hi = self.spans[name]
        return nx.take(self.embeddings, np.arange(lo, hi), axis=-2)


# ----------------------------------------------------------------------------
# operations
# ----------------------------------------------------------------------------


def embed_symbols(ids, table: Tensor) -> Tensor:
    """Row lookup into a (V, d) table; ``ids`` may carry leading batch axes."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].ravel()[0]
        raise VocabError(f"token id {int(bad)} outside vocabulary of size {vocab}")
    if ids.size == 0:
        return Tensor(np.zeros((*ids.shape, table.shape[1])))
    return nx.embedding(table, ids)


def patchify(raster: np.ndarray, patch: int) -> np.ndarray:
    """Split (..., R, R) rasters into (..., (R/p)^2, p*p) row-major patches."""
    raster = np.asarray(raster, dtype=np.float64)
    r = raster.shape[-1]
    if raster.shape[-2] != r:
        raise ConfigError(f"raster must be square, got {raster.shape[-2:]}")
    if patch <= 0 or r % patch:
        raise ConfigError(f"raster size {r} not divisible by patch size {patch}")
    g = r // patch
    lead = raster.shape[:-2]
    x = raster.reshape(*lead, g, patch, g, patch)
    x = np.moveaxis(x, -3, -2)  # (..., g, g, p, p)
    return x.reshape(*lead, g * g, patch * patch)


def encode_scene(raster, patch_proj: Tensor, patch: int = 4) -> Tensor:
    """Linear patch embedding of the occupancy raster (bias-free)."""
    flat = patchify(raster, patch)
    if flat.shape[-1] != patch_proj.shape[0]:
        raise ConfigError(
            f"patch projection expects {patch_proj.shape[0]} inputs, patches have {flat.shape[-1]}"
        )
    return nx.matmul(Tensor(flat), patch_proj)


def mlp2(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Bias-free two-layer perceptron with a SiLU in between."""
    return nx.matmul(nx.silu(nx.matmul(x, w1)), w2)


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{what} contains non-finite values")
    return arr


def project_point(point, w1: Tensor, w2: Tensor) -> Tensor:
    """Target point in metres, shape (..., 2) -> one token row (..., 1, d)."""
    p = _finite(np.asarray(point, dtype=np.float64), "target point") / POSITION_SCALE
    return mlp2(Tensor(p[..., None, :]), w1, w2)


def project_ego(features, w1: Tensor, w2: Tensor) -> Tensor:
    """Normalized ego features (..., 5) -> one token row (..., 1, d).

    Accepts an ``EgoState`` for the unbatched case.
    """
    if isinstance(features, EgoState):
        features = features.features()
    f = _finite(np.asarray(features, dtype=np.float64), "ego state")
    return mlp2(Tensor(f[..., None, :]), w1, w2)


def time_embedding(tau) -> np.ndarray:
    """sin/cos(2*pi*2^k*tau) for k = 0..3, interleaved per frequency."""
    tau = np.asarray(tau, dtype=np.float64)
    freqs = 2.0 * np.pi * 2.0 ** np.arange(TIME_EMBED_DIM // 2)
    ang = tau[..., None] * freqs
    out = np.empty((*tau.shape, TIME_EMBED_DIM))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def make_action_tokens(
    path,
    speed,
    tau,
    path_mlp: tuple[Tensor, Tensor],
    speed_mlp: tuple[Tensor, Tensor],
) -> Tensor:
    """Noisy action tokens: one per waypoint, then one per speed step.

    ``path`` is (..., 20, 2), ``speed`` (..., 10, 1), ``tau`` scalar or (...,).
    Each row is the preprocessor MLP applied to [state row, e(tau)].
    """
    path = path if isinstance(path, Tensor) else Tensor(path)
    speed = speed if isinstance(speed, Tensor) else Tensor(speed)
    if path.shape[-2:] != (N_WAYPOINTS, 2) or speed.shape[-2:] != (N_SPEEDS, 1):
        raise InputError(
            f"action state must be (20, 2) path and (10, 1) speed, got {path.shape}, {speed.shape}"
        )
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(~np.isfinite(tau)) or np.any(tau < 0.0) or np.any(tau > 1.0):
        raise InputError(f"flow time must lie in [0, 1], got {tau}")
    lead = path.shape[:-2]
    emb = time_embedding(np.broadcast_to(tau, lead))[..., None, :]  # (..., 1, 8)
    path_in = nx.concat(
        [path, Tensor(np.broadcast_to(emb, (*lead, N_WAYPOINTS, TIME_EMBED_DIM)))], axis=-1
    )
    speed_in = nx.concat(
        [speed, Tensor(np.broadcast_to(emb, (*lead, N_SPEEDS, TIME_EMBED_DIM)))], axis=-1
    )
    return nx.concat([mlp2(path_in, *path_mlp), mlp2(speed_in, *speed_mlp)], axis=-2)


def interleave(groups: Mapping[str, Tensor]) -> InterleavedSequence:
    """Concatenate the six token groups in fixed order and tag every position.

    ``groups`` maps each of GROUP_ORDER to a (..., n_g, d) tensor; the action
    group must hold exactly 20 path rows followed by 10 speed rows.
    """
    missing = [g for g in GROUP_ORDER if g not in groups]
    if missing:
        raise InputError(f"missing token groups: {missing}")
    width = {groups[g].shape[-1] for g in GROUP_ORDER}
    lead = {groups[g].shape[:-2] for g in GROUP_ORDER if groups[g].shape[-2] > 0}
    if len(width) != 1 or len(lead) > 1:
        raise DimensionError(
            "token groups disagree on width or batch shape: "
            + ", ".join(f"{g}={groups[g].shape}" for g in GROUP_ORDER)
        )
    if groups["action"].shape[-2] not in (0, N_ACTION):
        raise InputError(f"action group must hold {N_ACTION} tokens, got {groups['action'].shape[-2]}")
    tags: list[TokenType] = []
    spans: dict[str, tuple[int, int]] = {}
    parts = []
    for g in GROUP_ORDER:
        t = groups[g]
        n = t.shape[-2]
        spans[g] = (len(tags), len(tags) + n)
        if g == "action":
            tags += [TokenType.PATH_ACTION] * (n and N_WAYPOINTS) + [TokenType.SPEED_ACTION] * (
                n and N_SPEEDS
            )
        else:
            tags += [_GROUP_TAG[g]] * n
        if n:
            parts.append(t)
    return InterleavedSequence(nx.concat(parts, axis=-2), tags, spans)


def index_sets(tags: Sequence[TokenType] | InterleavedSequence):
    """Ascending positions routed to the VL expert, to the trajectory expert,
    and the subset of trajectory positions holding noisy action tokens."""
    if isinstance(tags, InterleavedSequence):
        tags = tags.tags
    vl = np.array([i for i, t in enumerate(tags) if t in VL_TYPES], dtype=np.int64)
    act = np.array([i for i, t in enumerate(tags) if t in ACT_TYPES], dtype=np.int64)
    action = np.array([i for i, t in enumerate(tags) if t in ACTION_TYPES], dtype=np.int64)
    return vl, act, action
