"""Flat ``key = value`` run configuration with a fixed schema.

Grammar: one ``key = value`` per line, ``#`` starts a comment, and optional
``[section]`` headers group keys. A key under a header must belong to that
section. Unknown keys, duplicates and malformed values are rejected.
Booleans are ``true``/``false``; lists are comma separated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import ViTConfig
from .errors import ConfigError
from .head import HEAD_MODES

SECTIONS = ("backbone", "lora", "router", "head", "data", "stage1", "stage2", "eval")

# Optimizer step size used at this scale; see README for the reasoning.
DEFAULT_LR = 3e-3


def _key(section, default, kind, help_=""):
    return field(default=default, metadata={"section": section, "kind": kind, "help": help_})


@dataclass(frozen=True)
class RunConfig:
    # backbone
    image_size: int = _key("backbone", 32, int)
    patch_size: int = _key("backbone", 4, int)
    channels: int = _key("backbone", 3, int)
    embed_dim: int = _key("backbone", 64, int)
    depth: int = _key("backbone", 4, int)
    heads: int = _key("backbone", 4, int)
    mlp_ratio: int = _key("backbone", 4, int)
    lora_targets: tuple = _key("backbone", ("q", "v"), tuple)
    backbone_seed: int = _key("backbone", 0, int)
    warmup_epochs: int = _key("backbone", 10, int)
    # lora
    rank: int = _key("lora", 4, int)
    alpha: float = _key("lora", 8.0, float)
    # router
    router_hidden: int = _key("router", 128, int)
    route_per_layer: bool = _key("router", False, bool)
    # head
    head: str = _key("head", "attn_pool", str)
    # data
    seed: int = _key("data", 0, int, "seeds initialization, shuffling, augmentation and fusion")
    k: int = _key("data", 3, int)
    n_real_train: int = _key("data", 500, int)
    n_fake_train: int = _key("data", 500, int)
    n_real_test: int = _key("data", 100, int)
    n_fake_test: int = _key("data", 100, int)
    fingerprint_amplitude: float = _key("data", 0.05, float)
    augment: bool = _key("data", True, bool)
    # stage1
    stage1_epochs: int = _key("stage1", 5, int)
    stage1_batch_size: int = _key("stage1", 32, int)
    stage1_lr: float = _key("stage1", DEFAULT_LR, float)
    stage1_weight_decay: float = _key("stage1", 5e-4, float)
    stage1_beta1: float = _key("stage1", 0.9, float)
    stage1_beta2: float = _key("stage1", 0.95, float)
    stage1_eps: float = _key("stage1", 1e-8, float)
    # stage2
    stage2_epochs: int = _key("stage2", 5, int)
    stage2_batch_size: int = _key("stage2", 32, int)
    stage2_lr: float = _key("stage2", DEFAULT_LR, float)
    stage2_weight_decay: float = _key("stage2", 5e-4, float)
    stage2_beta1: float = _key("stage2", 0.9, float)
    stage2_beta2: float = _key("stage2", 0.95, float)
    stage2_eps: float = _key("stage2", 1e-8, float)
    lambda_route: float = _key("stage2", 1.0, float)
    lambda_reg: float = _key("stage2", 1e-4, float)
    p_fuse: float = _key("stage2", 0.15, float)
    no_router: bool = _key("stage2", False, bool)
    no_route_loss: bool = _key("stage2", False, bool)
    no_fusion: bool = _key("stage2", False, bool)
    joint_single_stage: bool = _key("stage2", False, bool)
    joint_epochs: int = _key("stage2", 10, int)
    # eval
    eval_batch_size: int = _key("eval", 100, int)
    threshold: float = _key("eval", 0.5, float)

    def __post_init__(self):
        positive = ("image_size", "patch_size", "channels", "embed_dim", "depth", "heads", "mlp_ratio",
                    "rank", "router_hidden", "k", "n_real_train", "n_fake_train", "n_real_test",
                    "n_fake_test", "stage1_batch_size", "stage2_batch_size", "eval_batch_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("warmup_epochs", "stage1_epochs", "stage2_epochs", "joint_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("stage1_lr", "stage2_lr", "alpha"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("stage1_weight_decay", "stage2_weight_decay", "lambda_route", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("stage1_beta1", "stage1_beta2", "stage2_beta1", "stage2_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if not 0 <= self.p_fuse <= 1:
            raise ConfigError(f"p_fuse must lie in [0, 1], got {self.p_fuse}")
        if not 0 <= self.threshold <= 1:
            raise ConfigError("threshold must lie in [0, 1]")
        if self.head not in HEAD_MODES:
            raise ConfigError(f"head must be one of {HEAD_MODES}, got {self.head!r}")
        if not 0 < self.fingerprint_amplitude <= 0.2:
            raise ConfigError("fingerprint_amplitude must lie in (0, 0.2]")
        if self.rank > self.embed_dim:
            raise ConfigError(f"rank {self.rank} exceeds embed_dim {self.embed_dim}")
        if self.no_router and self.route_per_layer:
            raise ConfigError("no_router contradicts route_per_layer")
        object.__setattr__(self, "lora_targets", self.vit().lora_targets)

    # ------------------------------------------------------------ views

    def vit(self) -> ViTConfig:
        return ViTConfig(image_size=self.image_size, patch_size=self.patch_size, channels=self.channels,
                         embed_dim=self.embed_dim, depth=self.depth, heads=self.heads,
                         mlp_ratio=self.mlp_ratio, lora_targets=self.lora_targets,
                         warmup_epochs=self.warmup_epochs)

    def with_overrides(self, **kw):
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return replace(self, **kw)

    def to_text(self):
        """Canonical resolved form: every key, grouped by section, schema order."""
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for f in fields(self):
                if f.metadata["section"] == section:
                    lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def write(self, directory):
        path = Path(directory) / "config.txt"
        path.write_text(self.to_text())
        return path


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name, kind, text):
    try:
        if kind is bool:
            if text not in ("true", "false"):
                raise ValueError
            return text == "true"
        if kind is tuple:
            items = tuple(t.strip() for t in text.split(",") if t.strip())
            if not items:
                raise ValueError
            return items
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


SCHEMA = {f.name: f.metadata for f in fields(RunConfig)}


def parse_config(text, source="<config>"):
    """Parse config text into a validated ``RunConfig``; absent keys take defaults."""
    values = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]") or line[1:-1].strip() not in SECTIONS:
                raise ConfigError(f"{where}: unknown section {line}")
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if section is not None and SCHEMA[key]["section"] != section:
            raise ConfigError(f"{where}: key {key!r} belongs to [{SCHEMA[key]['section']}], not [{section}]")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _coerce(key, SCHEMA[key]["kind"], value)
    return RunConfig(**values)


def load_config(path):
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))
