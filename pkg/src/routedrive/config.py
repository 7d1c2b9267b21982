"""Line-oriented ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored; unknown keys are an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .model import VARIANTS, ModelConfig
from .training import LossWeights, TrainConfig

DEFAULT_TEXT = """\
# model
d = 64
layers = 4
heads = 4
d-ff = 128
vocab = 64
max-len = 64
variant = routed
init-seed = 0
# optimization
lr = 3e-4
epochs = 10, 12, 7
batch-size = 16
grad-clip = 1.0
lambda-path = 1.0
lambda-smooth = 0.1
lambda-speed = 1.0
shuffle-seed = 0
freeze-attn-stage2 = false
# inference
euler-steps = 10
eval-seed = 0
"""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_variant(self, variant: str) -> "RunConfig":
        return RunConfig(replace(self.model, variant=variant), self.train)


def _int(key: str, v: str) -> int:
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {v!r}") from None


def _float(key: str, v: str) -> float:
    try:
        return float(v)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {v!r}") from None


def _bool(key: str, v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {v!r}")


_MODEL_INT = {
    "d": "d", "layers": "layers", "heads": "heads", "d-ff": "d_ff", "vocab": "vocab",
    "max-len": "max_len", "init-seed": "seed",
}
_TRAIN_INT = {
    "batch-size": "batch_size", "shuffle-seed": "shuffle_seed", "euler-steps": "euler_steps",
    "eval-seed": "eval_seed",
}
_TRAIN_FLOAT = {"lr": "lr", "grad-clip": "grad_clip"}
_WEIGHTS = {"lambda-path": "path", "lambda-smooth": "smooth", "lambda-speed": "speed"}


def parse_config(text: str) -> RunConfig:
    model_kw: dict = {}
    train_kw: dict = {}
    weights_kw: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in _MODEL_INT:
            model_kw[_MODEL_INT[key]] = _int(key, value)
        elif key == "variant":
            if value not in VARIANTS:
                raise ConfigError(f"line {lineno}: unknown variant {value!r}")
            model_kw["variant"] = value
        elif key in _TRAIN_INT:
            train_kw[_TRAIN_INT[key]] = _int(key, value)
        elif key in _TRAIN_FLOAT:
            train_kw[_TRAIN_FLOAT[key]] = _float(key, value)
        elif key in _WEIGHTS:
            weights_kw[_WEIGHTS[key]] = _float(key, value)
        elif key == "epochs":
            parts = [p.strip() for p in value.split(",")]
            if len(parts) != 3:
                raise ConfigError(f"line {lineno}: epochs needs three comma-separated values")
            train_kw["epochs"] = tuple(_int(key, p) for p in parts)
        elif key == "freeze-attn-stage2":
            train_kw["freeze_attn_stage2"] = _bool(key, value)
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    train_kw["weights"] = LossWeights(**weights_kw)
    return RunConfig(ModelConfig(**model_kw), TrainConfig(**train_kw))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))
