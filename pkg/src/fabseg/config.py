"""Configuration objects and the ``key = value`` config file with named sections."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import InvalidArgument
from .losses import FinetuneLossWeights, PrompterLossWeights
from .prompter import PrompterConfig
from .sam import SamConfig


@dataclass
class TrainConfig:
    phase: str = "prompter"
    optimizer: str = "sgd"
    batch_size: int = 8
    iterations: int = 80000
    epochs: int = 20
    lr0: float = 0.004
    power: float = 0.9
    weight_decay: float = 0.0001
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.phase not in ("prompter", "finetune"):
            raise InvalidArgument(f"unknown phase {self.phase!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidArgument(f"unknown optimizer {self.optimizer!r}")
        if self.lr0 <= 0 or self.batch_size < 1:
            raise InvalidArgument("lr0 must be positive and batch_size >= 1")
        self.betas = tuple(float(b) for b in self.betas)


def prompter_train_defaults(**overrides):
    return TrainConfig(**{"phase": "prompter", "optimizer": "sgd", "batch_size": 8, "iterations": 80000,
                          "lr0": 0.004, **overrides})


def finetune_train_defaults(**overrides):
    return TrainConfig(**{"phase": "finetune", "optimizer": "adam", "batch_size": 4, "epochs": 20,
                          "lr0": 0.0003, **overrides})


@dataclass
class AblationFlags:
    ftd: bool = True
    ftpe: bool = True
    mp: bool = True
    pp: bool = True


@dataclass
class PromptConfig:
    n_fg: int = 4
    n_bg: int = 4
    t_fg: float = 0.7
    t_bg: float = 0.3
    source: str = "prompter"

    def __post_init__(self):
        if self.source not in ("prompter", "ground_truth"):
            raise InvalidArgument(f"prompt source must be 'prompter' or 'ground_truth', got {self.source!r}")


@dataclass
class DataConfig:
    manifest: str = ""
    tile: int = 256
    lo: int = 0
    hi: int = 3000
    threshold: float = 0.5
    min_area: int = 16


@dataclass
class FabsegConfig:
    data: DataConfig = field(default_factory=DataConfig)
    prompter: PrompterConfig = field(default_factory=PrompterConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    sam: SamConfig = field(default_factory=SamConfig)
    prompter_loss: PrompterLossWeights = field(default_factory=PrompterLossWeights)
    finetune_loss: FinetuneLossWeights = field(default_factory=FinetuneLossWeights)
    train_prompter: TrainConfig = field(default_factory=prompter_train_defaults)
    train_finetune: TrainConfig = field(default_factory=finetune_train_defaults)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        size = (self.data.tile, self.data.tile)
        if self.prompter.input_size != size:
            self.prompter = dataclasses.replace(self.prompter, input_size=size)
        if self.sam.input_size != size:
            self.sam = dataclasses.replace(self.sam, input_size=size)


# section -> list of (key, owning attribute, field name)
_LAYOUT = {
    "data": [(k, "data", k) for k in ("manifest", "tile", "lo", "hi", "threshold", "min_area")],
    "prompter": [(k, "prompter", k) for k in ("backbone_channels", "blocks_per_stage", "aspp_rates",
                                              "aspp_channels", "decoder_channels", "low_level_channels")]
    + [(k, "prompts", k) for k in ("n_fg", "n_bg", "t_fg", "t_bg")],
    "sam": [(k, "sam", k) for k in ("patch_size", "embed_dim", "encoder_depth", "encoder_heads", "prompt_dim",
                                    "decoder_depth", "decoder_heads", "decoder_mlp_dim")]
    + [("prompt_source", "prompts", "source")],
    "loss": [("w_m", "prompter_loss", "w_m"), ("w_a", "prompter_loss", "w_a"), ("w_d", "finetune_loss", "w_d"),
             ("w_f", "finetune_loss", "w_f"), ("alpha", "finetune_loss", "alpha"),
             ("gamma", "finetune_loss", "gamma")],
    "train.prompter": [(k, "train_prompter", k) for k in ("optimizer", "batch_size", "iterations", "lr0", "power",
                                                          "weight_decay", "momentum", "seed")],
    "train.finetune": [(k, "train_finetune", k) for k in ("optimizer", "batch_size", "epochs", "lr0", "power",
                                                          "weight_decay", "betas", "eps", "seed")],
    "ablation": [(k, "ablation", k) for k in ("ftd", "ftpe", "mp", "pp")],
}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(raw, like):
    raw = raw.strip()
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise InvalidArgument(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        kind = type(like[0]) if like else float
        return tuple(kind(s) for s in items)
    return raw


def config_to_text(cfg: FabsegConfig) -> str:
    lines = []
    for section, keys in _LAYOUT.items():
        lines.append(f"[{section}]")
        for key, owner, attr in keys:
            lines.append(f"{key} = {_format(getattr(getattr(cfg, owner), attr))}")
        lines.append("")
    return "\n".join(lines)


def config_from_text(text: str) -> FabsegConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    defaults = FabsegConfig()
    parts = {name: dataclasses.asdict(getattr(defaults, name)) for name in
             ("data", "prompter", "prompts", "sam", "prompter_loss", "finetune_loss",
              "train_prompter", "train_finetune", "ablation")}
    for section in parser.sections():
        if section not in _LAYOUT:
            raise InvalidArgument(f"unknown config section [{section}]")
        known = {key: (owner, attr) for key, owner, attr in _LAYOUT[section]}
        for key, raw in parser.items(section):
            if key not in known:
                raise InvalidArgument(f"unknown key {key!r} in [{section}]")
            owner, attr = known[key]
            parts[owner][attr] = _parse(raw, parts[owner][attr])
    return FabsegConfig(
        data=DataConfig(**parts["data"]),
        prompter=PrompterConfig(**parts["prompter"]),
        prompts=PromptConfig(**parts["prompts"]),
        sam=SamConfig(**{**parts["sam"], "input_size": (parts["data"]["tile"],) * 2}),
        prompter_loss=PrompterLossWeights(**parts["prompter_loss"]),
        finetune_loss=FinetuneLossWeights(**parts["finetune_loss"]),
        train_prompter=TrainConfig(**parts["train_prompter"]),
        train_finetune=TrainConfig(**parts["train_finetune"]),
        ablation=AblationFlags(**parts["ablation"]),
    )


def load_config(path) -> FabsegConfig:
    cfg = config_from_text(Path(path).read_text())
    manifest = cfg.data.manifest
    if manifest and not Path(manifest).is_absolute():
        cfg.data.manifest = str((Path(path).parent / manifest).resolve())
    return cfg


def save_config(path, cfg: FabsegConfig):
    Path(path).write_text(config_to_text(cfg))
