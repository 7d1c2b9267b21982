"""Flow-matching planner for the 20-waypoint path and 10-step speed profile.

Training interpolates X_tau = (1 - tau) * eps + tau * Y and regresses the
constant field Y - eps. Sampling starts from Gaussian noise and takes Euler
steps, re-running the transformer on the current state at every step. All
states live in normalized model units; outputs are converted back to metres
and m/s.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from . import tokenizer as tk
from .errors import ConfigError, InputError
from .language import language_loss
from .numerics import Tensor


@dataclass
class NoisyActionState:
    path: np.ndarray  # (..., 20, 2)
    speed: np.ndarray  # (..., 10, 1)
    tau: float | np.ndarray

    def __post_init__(self) -> None:
        if self.path.shape[-2:] != (tk.N_WAYPOINTS, 2) or self.speed.shape[-2:] != (tk.N_SPEEDS, 1):
            raise InputError(f"bad action state shapes {self.path.shape}, {self.speed.shape}")
        tau = np.asarray(self.tau)
        if np.any(tau < 0) or np.any(tau > 1):
            raise InputError(f"flow time must lie in [0, 1], got {self.tau}")


@dataclass
class TrajectoryOutput:
    waypoints: np.ndarray  # (..., 20, 2) metres, ego frame
    speeds: np.ndarray  # (..., 10) m/s


@dataclass
class FlowCondition:
    c_imp: Tensor
    c_exp: Tensor

    @property
    def c_fm(self) -> Tensor:
        return nx.concat([self.c_imp, self.c_exp], axis=-1)


@dataclass
class FlowNoise:
    """Per-sample draws for one flow-matching training step."""

    tau: np.ndarray  # (B,)
    eps_path: np.ndarray  # (B, 20, 2)
    eps_speed: np.ndarray  # (B, 10, 1)

    @classmethod
    def draw(cls, rng: np.random.Generator, batch: int) -> "FlowNoise":
        tau = rng.uniform(0.0, 1.0, size=batch)
        eps_path = rng.standard_normal((batch, tk.N_WAYPOINTS, 2))
        eps_speed = rng.standard_normal((batch, tk.N_SPEEDS, 1))
        return cls(tau, eps_path, eps_speed)


def normalize_path(path_m) -> np.ndarray:
    return np.asarray(path_m, dtype=np.float64) / tk.POSITION_SCALE


def normalize_speed(speed_ms) -> np.ndarray:
    return np.asarray(speed_ms, dtype=np.float64)[..., None] / tk.SPEED_SCALE


def sample_noisy(y, eps, tau):
    """(1 - tau) * eps + tau * y, elementwise; ``tau`` broadcasts over leading axes."""
    y = np.asarray(y, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if y.shape != eps.shape:
        raise InputError(f"sample_noisy shape mismatch: {y.shape} vs {eps.shape}")
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0) or np.any(tau > 1):
        raise InputError(f"flow time must lie in [0, 1], got {tau}")
    t = tau.reshape(tau.shape + (1,) * (y.ndim - tau.ndim))
    return (1.0 - t) * eps + t * y


def target_field(y, eps):
    y = np.asarray(y, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if y.shape != eps.shape:
        raise InputError(f"target_field shape mismatch: {y.shape} vs {eps.shape}")
    return y - eps


def implicit_condition(h_vl: Tensor, w_vl: Tensor) -> Tensor:
    """Mean-pool the vision-language states, then project."""
    if h_vl.shape[-2] < 1:
        raise InputError("implicit condition needs at least one vision-language token")
    return nx.matmul(nx.mean(h_vl, axis=-2), w_vl)


def explicit_condition(ego, nav_tokens: Tensor, point, w_ego: Tensor, w_nav: Tensor, w_point: Tensor) -> Tensor:
    """[proj(ego) | proj(mean of goal+command embeddings) | proj(target point)]."""
    if nav_tokens.shape[-2] < 1:
        raise InputError("explicit condition needs at least one goal or command token")
    if isinstance(ego, tk.EgoState):
        ego = ego.features()
    ego_t = Tensor(np.asarray(ego, dtype=np.float64))
    point_t = Tensor(np.asarray(point, dtype=np.float64) / tk.POSITION_SCALE)
    return nx.concat(
        [
            nx.matmul(ego_t, w_ego),
            nx.matmul(nx.mean(nav_tokens, axis=-2), w_nav),
            nx.matmul(point_t, w_point),
        ],
        axis=-1,
    )


def flow_condition(model, h: Tensor, seq: tk.InterleavedSequence, batch) -> FlowCondition:
    vl, _, _ = tk.index_sets(seq.tags)
    s = model.store
    c_imp = implicit_condition(nx.take(h, vl, axis=-2), s["cond.vl"])
    nav = tk.embed_symbols(batch.nav_ids, s["embed.symbols"])
    c_exp = explicit_condition(batch.ego, nav, batch.target, s["cond.ego"], s["cond.nav"], s["cond.point"])
    return FlowCondition(c_imp, c_exp)


def field_from_hidden(model, h: Tensor, seq: tk.InterleavedSequence, batch) -> tuple[Tensor, Tensor]:
    """Flow-head outputs for every path and speed token of an already-run sequence."""
    s = model.store
    lo, hi = seq.spans["action"]
    if hi - lo != tk.N_ACTION:
        raise InputError("sequence carries no action tokens")
    c_fm = flow_condition(model, h, seq, batch).c_fm  # (B, dc)
    proj = nx.matmul(nx.take(h, np.arange(lo, hi), axis=-2), s["flow.proj"])  # (B, 30, d/2)
    b = proj.shape[0]
    cond = nx.broadcast_to(nx.reshape(c_fm, (b, 1, c_fm.shape[-1])), (b, tk.N_ACTION, c_fm.shape[-1]))
    feats = nx.concat([proj, cond], axis=-1)
    path_f = nx.take(feats, np.arange(tk.N_WAYPOINTS), axis=-2)
    speed_f = nx.take(feats, np.arange(tk.N_WAYPOINTS, tk.N_ACTION), axis=-2)
    v_path = tk.mlp2(path_f, s["flow.path.w1"], s["flow.path.w2"])
    v_speed = tk.mlp2(speed_f, s["flow.speed.w1"], s["flow.speed.w2"])
    return v_path, v_speed


def predict_field(model, batch, state: NoisyActionState) -> tuple[Tensor, Tensor]:
    """Predicted velocity for path (B, 20, 2) and speed (B, 10, 1) at ``state``."""
    seq = model.sequence(batch, state)
    h = model.forward(seq)
    return field_from_hidden(model, h, seq, batch)


FieldFn = Callable[[NoisyActionState], tuple[np.ndarray, np.ndarray]]


def initial_noise(seed: int, batch: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    path = rng.standard_normal((batch, tk.N_WAYPOINTS, 2))
    speed = rng.standard_normal((batch, tk.N_SPEEDS, 1))
    return path, speed


def euler_integrate(
    model,
    batch,
    steps: int = 10,
    seed: int = 0,
    field_fn: FieldFn | None = None,
    x0: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrajectoryOutput:
    """Integrate dX/dtau = v(X, tau) from tau=0 to 1 with ``steps`` Euler steps.

    Path and speed states advance together, one transformer pass per step.
    ``field_fn`` replaces the learned field (used by tests). The regression
    ablation has no ODE: a single pass from the zero state is the output.
    """
    if steps < 1:
        raise ConfigError(f"Euler integration needs at least one step, got {steps}")
    b = len(batch)
    if model is not None and model.cfg.variant == "regression-head" and field_fn is None:
        state = NoisyActionState(np.zeros((b, tk.N_WAYPOINTS, 2)), np.zeros((b, tk.N_SPEEDS, 1)), 0.0)
        vp, vs = predict_field(model, batch, state)
        return _denormalize(vp.data, vs.data)
    path, speed = x0 if x0 is not None else initial_noise(seed, b)
    path = np.array(path, dtype=np.float64)
    speed = np.array(speed, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        state = NoisyActionState(path, speed, k / steps)
        if field_fn is None:
            vp, vs = predict_field(model, batch, state)
            vp, vs = vp.data, vs.data
        else:
            vp, vs = field_fn(state)
        path = path + dt * vp
        speed = speed + dt * vs
    return _denormalize(path, speed)


def _denormalize(path: np.ndarray, speed: np.ndarray) -> TrajectoryOutput:
    return TrajectoryOutput(path * tk.POSITION_SCALE, speed[..., 0] * tk.SPEED_SCALE)


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------


def smoothness_loss(waypoints) -> Tensor:
    """(1/18) * sum_{k=2..19} |p_{k+1} - 2 p_k + p_{k-1}|^2, averaged over any batch axis."""
    wp = waypoints if isinstance(waypoints, Tensor) else Tensor(waypoints)
    if wp.shape[-2:] != (tk.N_WAYPOINTS, 2):
        raise InputError(f"smoothness loss expects 20 waypoints of 2 coords, got {wp.shape}")
    n = tk.N_WAYPOINTS
    second = nx.add(
        nx.sub(nx.take(wp, np.arange(2, n), axis=-2), nx.scale(nx.take(wp, np.arange(1, n - 1), axis=-2), 2.0)),
        nx.take(wp, np.arange(0, n - 2), axis=-2),
    )
    # mse averages over (batch, 18, 2); undo the coordinate averaging
    return nx.scale(nx.mse(second, np.zeros(second.shape)), 2.0)


def _per_point_sq(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over batch and points of the squared L2 error per point."""
    return nx.scale(nx.mse(pred, target), float(target.shape[-1]))


def flow_terms(model, batch, noise: FlowNoise, with_language: bool = False) -> dict[str, Tensor]:
    """Path, speed and smoothness losses from one forward pass.

    The smoothness term is applied to the one-step denoised path estimate
    X_tau + (1 - tau) * v_hat. With ``with_language`` the language loss is
    read off the same pass.
    """
    if batch.path is None or batch.speed is None:
        raise InputError("batch carries no ground-truth trajectories")
    y_path = normalize_path(batch.path)
    y_speed = normalize_speed(batch.speed)
    regression = model.cfg.variant == "regression-head"
    b = len(batch)
    if regression:
        tau = np.zeros(b)
        x_path, x_speed = np.zeros_like(y_path), np.zeros_like(y_speed)
        want_path, want_speed = y_path, y_speed
    else:
        tau = noise.tau
        x_path = sample_noisy(y_path, noise.eps_path, tau)
        x_speed = sample_noisy(y_speed, noise.eps_speed, tau)
        want_path = target_field(y_path, noise.eps_path)
        want_speed = target_field(y_speed, noise.eps_speed)
    state = NoisyActionState(x_path, x_speed, tau)
    seq = model.sequence(batch, state)
    h = model.forward(seq)
    v_path, v_speed = field_from_hidden(model, h, seq, batch)
    if regression:
        denoised = v_path
    else:
        remaining = Tensor((1.0 - tau)[:, None, None])
        denoised = nx.add(Tensor(x_path), nx.mul(v_path, remaining))
    terms = {
        "path": _per_point_sq(v_path, want_path),
        "speed": _per_point_sq(v_speed, want_speed),
        "smooth": smoothness_loss(denoised),
    }
    if with_language:
        terms["lang"] = language_loss(model, batch, h=h, seq=seq)
    return terms


def path_flow_loss(model, batch, rng: np.random.Generator) -> Tensor:
    return flow_terms(model, batch, FlowNoise.draw(rng, len(batch)))["path"]


def speed_flow_loss(model, batch, rng: np.random.Generator) -> Tensor:
    return flow_terms(model, batch, FlowNoise.draw(rng, len(batch)))["speed"]
