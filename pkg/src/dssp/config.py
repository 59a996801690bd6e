"""Training configuration: fields, file format, digests, shipped presets.

Config files are flat ``key = value`` text, one pair per line, with ``#``
comments.  Keys are the TrainConfig field names (the dynamics-loss weight
is written ``lambda`` in files and stored as ``lambda_`` since Python
reserves the bare word).  Unknown keys are an error so typos cannot turn
into silent defaults.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from importlib import resources

from .numcore import DsspError

VARIANTS = ("full", "no_hist", "no_td", "no_recent", "no_dyn", "attn_denoiser")


@dataclass
class TrainConfig:
    env: str = "tapcount"
    demos: str = ""
    H: int = 8
    H_a: int = 6
    N: int = 3
    L: int = 100
    inference_steps: int = 10
    lambda_: float = 0.05
    lr: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    weight_decay: float = 1e-6
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 32
    d_model: int = 64
    d_state: int = 16
    denoiser_layers: int = 2
    encoder_layers: int = 2
    seed: int = 0
    variant: str = "full"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (self.H >= self.H_a >= 1):
            raise DsspError(f"need H >= H_a >= 1, got H={self.H}, H_a={self.H_a}")
        if self.N < 1:
            raise DsspError("recent window N must be at least 1")
        if self.lambda_ < 0:
            raise DsspError("dynamics loss weight must be non-negative")
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise DsspError("need 0 <= warmup_steps <= total_steps")
        if self.L < self.inference_steps or self.inference_steps < 1:
            raise DsspError("need L >= inference_steps >= 1")
        if self.variant not in VARIANTS:
            raise DsspError(f"unknown variant '{self.variant}' (choose from {', '.join(VARIANTS)})")
        if self.batch_size < 1 or self.d_model < 2 or self.d_state < 1:
            raise DsspError("batch_size, d_model, d_state must be positive (d_model >= 2)")

    @property
    def d_inner(self) -> int:
        return 2 * self.d_model


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_KEY_TO_FIELD = {("lambda" if f.name == "lambda_" else f.name): f.name for f in fields(TrainConfig)}


def parse_config_text(text: str, overrides: dict | None = None) -> TrainConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DsspError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _KEY_TO_FIELD:
            raise DsspError(f"config line {lineno}: unknown key '{key}'")
        field_name = _KEY_TO_FIELD[key]
        if field_name in values:
            raise DsspError(f"config line {lineno}: duplicate key '{key}'")
        values[field_name] = _convert(field_name, val, lineno)
    if overrides:
        values.update(overrides)
    return TrainConfig(**values)


def _convert(field_name: str, val: str, lineno: int):
    ftype = _FIELD_TYPES[field_name]
    try:
        if ftype in (int, "int"):
            return int(val)
        if ftype in (float, "float"):
            return float(val)
        return val
    except ValueError as exc:
        raise DsspError(f"config line {lineno}: bad value for '{field_name}': {val!r}") from exc


def parse_config(path: str, overrides: dict | None = None) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), overrides)


def format_config(cfg: TrainConfig) -> str:
    """Canonical text form: sorted keys, one per line."""
    lines = []
    for key in sorted(_KEY_TO_FIELD):
        value = getattr(cfg, _KEY_TO_FIELD[key])
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_digest(cfg: TrainConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()


def load_preset(name: str, overrides: dict | None = None) -> TrainConfig:
    ref = resources.files("dssp").joinpath(f"presets/{name}.cfg")
    if not ref.is_file():
        raise DsspError(f"no preset named '{name}'")
    return parse_config_text(ref.read_text(encoding="utf-8"), overrides)
