"""Flat ``key = value`` run configuration.

Keys are grouped by prefix: ``generator.*``, ``discriminator.*``, ``train.*``
and ``ssim.*``. ``preset = desk`` or ``preset = paper-256`` picks the network
defaults that the other keys then override. ``train.lambda`` maps onto
``TrainConfig.lam``. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .networks import PRESETS, DiscriminatorConfig, GeneratorConfig
from .ssim import SsimConfig
from .trainer import TrainConfig


class ConfigFileError(ValueError):
    pass


_ALIASES = {"train.lambda": "train.lam"}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ssim: SsimConfig = field(default_factory=SsimConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed))


def _coerce(raw: str, typ, key: str):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(typ, str)
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    entries: dict[str, tuple[int, str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key in entries:
            raise ConfigFileError(f"{source}:{lineno}: duplicate key {key}")
        entries[key] = (lineno, value)

    preset = entries.pop("preset", (0, "desk"))[1]
    if preset not in PRESETS:
        raise ConfigFileError(f"{source}: unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
    gen, disc = PRESETS[preset]
    groups = {"generator": gen, "discriminator": disc, "train": TrainConfig(), "ssim": SsimConfig()}
    updates: dict[str, dict] = {g: {} for g in groups}
    for key, (lineno, value) in entries.items():
        group, _, name = key.partition(".")
        if group not in groups or not name:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key}")
        fields = {f.name: f.type for f in dataclasses.fields(groups[group])}
        if name not in fields:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key}")
        updates[group][name] = _coerce(value, fields[name], key)
    built = {}
    for group, base in groups.items():
        try:
            built[group] = replace(base, **updates[group])
        except ValueError as e:
            raise ConfigFileError(f"{source}: {e}") from e
    return RunConfig(preset, built["generator"], built["discriminator"], built["train"], built["ssim"])


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigFileError(f"cannot read config {path}: {e.strerror}") from e
    return parse_config(text, str(path))


def format_config(cfg: RunConfig) -> str:
    lines = [f"preset = {cfg.preset}"]
    for group in ("generator", "discriminator", "train", "ssim"):
        for k, v in dataclasses.asdict(getattr(cfg, group)).items():
            key = "train.lambda" if (group, k) == ("train", "lam") else f"{group}.{k}"
            lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
