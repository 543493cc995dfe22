"""Run configuration and its line-oriented ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

VARIANTS = ("baseline_cnn", "baseline_attn", "cmgm", "cmgm_agl")
GRAFT_PAIRS = ("R5-S1", "R5-S2", "R5-S3", "R5-S4")


@dataclass
class TrainConfig:
    # model
    variant: str = "cmgm_agl"
    input_hw: int = 64
    attn_input_hw: int = 0  # 0 -> input_hw // 2
    channel_factor: float = 0.125
    base_channels: int = 64
    patch_size: int = 4
    decoder_channels: int = 16
    cmgm_heads: int = 1
    attn_heads: int = 1
    graft_pair: str = "R5-S2"
    attention_cap: int = 4096
    # loss
    beta: float = 1.0
    # optimisation
    lr_backbone_attn: float = 0.003
    lr_other: float = 0.03
    unlink_lr: bool = False
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 4
    epochs: int = 32
    warmup_fraction: float = 0.1
    seed: int = 0
    augment: bool = True
    scales: tuple = (1.0,)
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.graft_pair not in GRAFT_PAIRS:
            raise ValueError(f"graft_pair must be one of {GRAFT_PAIRS}, got {self.graft_pair!r}")
        if not self.attn_input_hw:
            self.attn_input_hw = self.input_hw // 2
        if not self.unlink_lr:
            self.lr_other = 10.0 * self.lr_backbone_attn
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        self.scales = tuple(float(s) for s in self.scales)

    @property
    def graft_stage(self):
        return int(self.graft_pair.split("-S")[1])

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def dumps(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())


def _coerce(name, raw, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    return raw


def parse_config(text, **overrides) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are an error."""
    defaults = TrainConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, known[key])
    values.update(overrides)
    return TrainConfig(**values)


def load_config(path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(), **overrides)
