"""Flat key=value run configuration with typed parsing and CLI overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .model import AblationFlags, ModelConfig, TaskMode
from .data import SyntheticConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    dim: int = 40
    attn_layers: int = 2
    heads: int = 1
    depth: int = 1
    share_channels: bool = False
    residual: bool = True
    normalize: bool = True
    head_hidden: int = 32
    kp_hidden: int = 16
    window: int = 2
    top_k: int = 1
    self_exclusion: str = "all"
    hh_memories: str = "vis"
    # component / modality switches
    use_hierarchy: bool = True
    use_hh: bool = True
    use_hc: bool = True
    use_temporal: bool = True
    use_selection: bool = True
    modalities: str = "vis,key"
    use_consistency: bool = True
    # loss
    temperature: float = 1.0
    consistency_weight: float = 1.0
    include_positive: bool = False
    bidirectional: bool = False
    # training
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_videos: int = 4
    seed: int = 0
    ablate_repeats: int = 3
    # task and data
    task: str = "stal"
    data_manifest: str = ""
    num_videos: int = 28
    eval_videos: int = 10
    clips: int = 6
    actors: int = 2
    tokens: int = 4
    classes: int = 5
    noise: float = 0.3
    temporal_strength: float = 0.5
    frac_vis: float = 0.35
    frac_key: float = 0.25
    frac_joint: float = 0.4
    raw_keypoints: bool = False

    def task_mode(self) -> TaskMode:
        try:
            return TaskMode(self.task)
        except ValueError:
            raise ConfigError(f"task must be 'stal' or 'gar', got {self.task!r}") from None

    def flags(self) -> AblationFlags:
        mods = tuple(m for m in self.modalities.split(",") if m)
        return AblationFlags(
            use_hierarchy=self.use_hierarchy,
            use_hh=self.use_hh,
            use_hc=self.use_hc,
            use_temporal=self.use_temporal,
            use_selection=self.use_selection,
            modalities=mods,
            use_consistency=self.use_consistency,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            attn_layers=self.attn_layers,
            heads=self.heads,
            depth=self.depth,
            share_channels=self.share_channels,
            residual=self.residual,
            normalize=self.normalize,
            classes=self.classes,
            head_hidden=self.head_hidden,
            kp_hidden=self.kp_hidden,
            raw_keypoints=self.raw_keypoints,
            window=self.window,
            top_k=self.top_k,
            self_exclusion=self.self_exclusion,
            hh_memories=self.hh_memories,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            temperature=self.temperature,
            include_positive_in_denominator=self.include_positive,
            consistency_weight=self.consistency_weight,
            bidirectional=self.bidirectional,
        )

    def synthetic_config(self, num_videos: int | None = None, seed: int | None = None) -> SyntheticConfig:
        return SyntheticConfig(
            seed=self.seed if seed is None else seed,
            num_videos=self.num_videos + self.eval_videos if num_videos is None else num_videos,
            clips=self.clips,
            actors=self.actors,
            tokens=self.tokens,
            dim=self.dim,
            classes=self.classes,
            noise=self.noise,
            temporal_strength=self.temporal_strength,
            frac_vis=self.frac_vis,
            frac_key=self.frac_key,
            frac_joint=self.frac_joint,
            task=self.task_mode(),
            raw_keypoints=self.raw_keypoints,
        )

    def validate(self) -> None:
        """Construct every derived config so invalid combinations fail here."""
        if self.lr < 0 or self.epochs < 0 or self.batch_videos < 1:
            raise ConfigError("lr/epochs must be >= 0 and batch_videos >= 1")
        if self.eval_videos < 1:
            raise ConfigError("eval_videos must be >= 1")
        self.task_mode()
        self.flags()
        self.model_config()
        self.loss_config()
        self.synthetic_config()

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = str(value).lower() if isinstance(value, bool) else str(value)
        return out


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    base: RunConfig | None = None,
) -> RunConfig:
    """Build a config from an optional file plus repeatable key=value overrides."""
    values: dict[str, object] = {} if base is None else {
        f.name: getattr(base, f.name) for f in fields(RunConfig)
    }
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        for lineno, line in enumerate(p.read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            values[key] = _parse_value(key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        values[key] = _parse_value(key, raw)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def with_overrides(cfg: RunConfig, **kwargs) -> RunConfig:
    out = replace(cfg, **kwargs)
    out.validate()
    return out
