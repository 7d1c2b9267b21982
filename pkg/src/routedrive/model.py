"""Parameter layout, ablation variants and sequence assembly for the full model."""

from __future__ import annotations

import fnmatch
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from . import tokenizer as tk
from .errors import ConfigError
from .numerics import ParamStore, Tensor
from .transformer import ExpertParams, RoutedLayerParams, build_mask, model_forward

VARIANTS = ("routed", "shared-ffn", "decoupled", "single-expert", "regression-head")

# parameter groups referenced by the training schedule
GROUPS: dict[str, tuple[str, ...]] = {
    "expert0": ("layers.*.expert0.*",),
    "expert1": ("layers.*.expert1.*",),
    "attention": ("layers.*.attn.*", "layers.*.ln_*"),
    "flow_heads": ("flow.path.*", "flow.speed.*"),
    "action_proj": ("flow.proj",),
    "cond_proj": ("cond.*",),
    "lm_head": ("lm_head.*",),
    "text_embed": ("embed.symbols",),
    "position_embed": ("embed.pos",),
    "tokenizers": ("embed.patch", "tok.*"),
}


@dataclass
class ModelConfig:
    d: int = 64
    layers: int = 4
    heads: int = 4
    d_ff: int = 128
    vocab: int = 64
    patch: int = 4
    raster: int = 16
    max_len: int = 64
    instruction_len: int = 3
    variant: str = "routed"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 4:
            raise ConfigError(f"d={self.d} must be divisible by 4 for the condition slices")
        if self.raster % self.patch:
            raise ConfigError(f"raster {self.raster} not divisible by patch {self.patch}")

    @property
    def cond_width(self) -> int:
        return self.d // 2 + 3 * (self.d // 4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        typed = {}
        for k, v in raw.items():
            typed[k] = v if k == "variant" else int(v)
        return cls(**typed)


@dataclass
class Batch:
    """Samples sharing one token layout, stacked along a leading axis.

    ``command_ids`` holds the command symbol, BOS and the instruction symbols
    (teacher-forced); ``text_targets`` are the symbols each of the last
    ``instruction_len + 1`` command positions should predict.
    """

    goal_ids: np.ndarray  # (B, n_goal)
    command_ids: np.ndarray  # (B, 2 + K)
    raster: np.ndarray  # (B, R, R)
    target: np.ndarray  # (B, 2) metres
    ego: np.ndarray  # (B, 5) normalized features
    path: np.ndarray | None = None  # (B, 20, 2) metres
    speed: np.ndarray | None = None  # (B, 10) m/s
    text_targets: np.ndarray | None = None  # (B, K + 1)
    index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.goal_ids.shape[0]

    @property
    def nav_ids(self) -> np.ndarray:
        """Goal symbols plus the raw command symbol (no generated text)."""
        return np.concatenate([self.goal_ids, self.command_ids[:, :1]], axis=1)

    def with_text(self, text: np.ndarray) -> "Batch":
        cmd = np.concatenate([self.command_ids[:, :2], text], axis=1)
        return Batch(
            self.goal_ids, cmd, self.raster, self.target, self.ego,
            self.path, self.speed, self.text_targets, self.index,
        )


class Model:
    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg)
        self._mask_cache: dict[tuple, np.ndarray] = {}

    # -- parameter views -------------------------------------------------

    def p(self, name: str) -> Tensor:
        return self.store[name]

    def layer(self, i: int) -> RoutedLayerParams:
        s = self.store
        pre = f"layers.{i}"

        def expert(e: int) -> ExpertParams:
            return ExpertParams(s[f"{pre}.expert{e}.gate"], s[f"{pre}.expert{e}.up"], s[f"{pre}.expert{e}.down"])

        e0 = expert(0)
        e1 = e0 if self.cfg.variant == "shared-ffn" else expert(1)
        return RoutedLayerParams(
            s[f"{pre}.attn.wq"], s[f"{pre}.attn.wk"], s[f"{pre}.attn.wv"], s[f"{pre}.attn.wo"],
            s[f"{pre}.ln_attn"], s[f"{pre}.ln_ffn"], (e0, e1),
        )

    def layers(self) -> list[RoutedLayerParams]:
        return [self.layer(i) for i in range(self.cfg.layers)]

    def group(self, name: str) -> list[str]:
        pats = GROUPS[name]
        return [n for n in self.store.names() if any(fnmatch.fnmatchcase(n, p) for p in pats)]

    # -- sequence assembly -----------------------------------------------

    def prefix_groups(self, batch: Batch) -> dict[str, Tensor]:
        s = self.store
        return {
            "goal": tk.embed_symbols(batch.goal_ids, s["embed.symbols"]),
            "image": tk.encode_scene(batch.raster, s["embed.patch"], self.cfg.patch),
            "target": tk.project_point(batch.target, s["tok.point.w1"], s["tok.point.w2"]),
            "command": tk.embed_symbols(batch.command_ids, s["embed.symbols"]),
        }

    def sequence(self, batch: Batch, state=None) -> tk.InterleavedSequence:
        """Token sequence for ``batch``; without ``state`` only the language prefix."""
        s = self.store
        groups = self.prefix_groups(batch)
        b, d = len(batch), self.cfg.d
        empty = Tensor(np.zeros((b, 0, d)))
        if state is None:
            groups["ego"] = empty
            groups["action"] = empty
        else:
            groups["ego"] = tk.project_ego(batch.ego, s["tok.ego.w1"], s["tok.ego.w2"])
            groups["action"] = tk.make_action_tokens(
                state.path, state.speed, state.tau,
                (s["tok.path.w1"], s["tok.path.w2"]),
                (s["tok.speed.w1"], s["tok.speed.w2"]),
            )
        return tk.interleave(groups)

    def routing(self, tags: Sequence[tk.TokenType]):
        vl, act, action = tk.index_sets(tags)
        if self.cfg.variant == "single-expert":
            vl, act = np.zeros(0, dtype=np.int64), np.arange(len(tags))
        return vl, act, action

    def mask(self, tags: Sequence[tk.TokenType]) -> np.ndarray:
        key = tuple(int(t) for t in tags)
        m = self._mask_cache.get(key)
        if m is None:
            m = build_mask(tags, decoupled=self.cfg.variant == "decoupled")
            self._mask_cache[key] = m
        return m

    def forward(self, seq: tk.InterleavedSequence) -> Tensor:
        """H^(L) for the sequence, with absolute position embeddings added to H^(0)."""
        n = len(seq)
        if n > self.cfg.max_len:
            raise ConfigError(f"sequence of {n} tokens exceeds max_len={self.cfg.max_len}")
        pos = nx.take(self.store["embed.pos"], np.arange(n), axis=0)
        h0 = nx.add(seq.embeddings, pos)
        vl, act, _ = self.routing(seq.tags)
        return model_forward(h0, self.layers(), self.mask(seq.tags), vl, act, self.cfg.heads)


def init_params(cfg: ModelConfig) -> ParamStore:
    """Seeded Gaussian initialization, all weight matrices bias-free."""
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    d, dff = cfg.d, cfg.d_ff
    out_scale = 1.0 / np.sqrt(2.0 * max(cfg.layers, 1))

    def w(name, fan_in, fan_out, gain=1.0):
        store.add(name, rng.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in))

    store.add("embed.symbols", rng.standard_normal((cfg.vocab, d)) * 0.5)
    w("embed.patch", cfg.patch * cfg.patch, d)
    store.add("embed.pos", rng.standard_normal((cfg.max_len, d)) * 0.1)
    w("tok.point.w1", 2, d)
    w("tok.point.w2", d, d)
    w("tok.ego.w1", tk.EGO_FEATURES, d)
    w("tok.ego.w2", d, d)
    w("tok.path.w1", 2 + tk.TIME_EMBED_DIM, d)
    w("tok.path.w2", d, d)
    w("tok.speed.w1", 1 + tk.TIME_EMBED_DIM, d)
    w("tok.speed.w2", d, d)
    experts = (0,) if cfg.variant == "shared-ffn" else (0, 1)
    for i in range(cfg.layers):
        pre = f"layers.{i}"
        for k in ("wq", "wk", "wv"):
            w(f"{pre}.attn.{k}", d, d)
        w(f"{pre}.attn.wo", d, d, out_scale)
        store.add(f"{pre}.ln_attn", np.ones(d))
        store.add(f"{pre}.ln_ffn", np.ones(d))
        for e in experts:
            w(f"{pre}.expert{e}.gate", d, dff)
            w(f"{pre}.expert{e}.up", d, dff)
            w(f"{pre}.expert{e}.down", dff, d, out_scale)
    w("lm_head.w", d, cfg.vocab)
    w("cond.vl", d, d // 2)
    w("cond.ego", tk.EGO_FEATURES, d // 4)
    w("cond.nav", d, d // 4)
    w("cond.point", 2, d // 4)
    w("flow.proj", d, d // 2)
    w("flow.path.w1", d // 2 + cfg.cond_width, d)
    w("flow.path.w2", d, 2, 0.1)
    w("flow.speed.w1", d // 2 + cfg.cond_width, d)
    w("flow.speed.w2", d, 1, 0.1)
    return store
