"""Run configuration: one YAML file drives every pipeline command.

Unknown keys are rejected so config typos fail loudly. patch_size and
central_window live at the top level and feed the pair sampler, the
architecture, and the grid extractor, which must agree on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .doc_io import SynthConfig
from .pair_gen import PairConfig
from .siamese_net import ArchConfig, ConvStage, TrainConfig, default_stages
from .feature_grid import GridConfig


@dataclass
class SynthSection:
    n_pages: int = 30
    page_height: int = 800
    page_width: int = 600
    line_count: tuple[int, int] = (5, 7)
    line_height: tuple[int, int] = (40, 56)
    line_spacing: tuple[int, int] = (32, 48)
    ink_density: float = 0.82
    skew_degrees: tuple[float, float] = (-1.5, 1.5)
    margin: int = 40

    def synth_config(self, seed: int) -> SynthConfig:
        return SynthConfig(
            page_height=self.page_height,
            page_width=self.page_width,
            line_count=tuple(self.line_count),
            line_height=tuple(self.line_height),
            line_spacing=tuple(self.line_spacing),
            ink_density=self.ink_density,
            skew_degrees=tuple(self.skew_degrees),
            seed=seed,
            margin=self.margin,
        )


@dataclass
class PairSection:
    gap: int | None = None
    jitter_max: int | None = None
    min_ink_ratio: float = 0.01
    val_fraction: float = 0.1


@dataclass
class ArchSection:
    stages: list | None = None  # None -> AlexNet-lineage default
    head_widths: tuple[int, ...] = (512, 256, 64, 16, 1)
    head_pool: tuple[int, int] | None = (3, 2)


@dataclass
class TrainSection:
    learning_rate: float = 1e-5
    batch_size: int = 8
    patience: int = 7
    max_epochs: int = 100


@dataclass
class BlobSection:
    min_blob_cells: int = 4


@dataclass
class GraphSection:
    k_neighbors: int = 4


@dataclass
class MetricSection:
    theta: float = 0.75


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/default"
    patch_size: int = 350
    central_window: int = 20
    grid_batch: int = 64
    synth: SynthSection = field(default_factory=SynthSection)
    pairs: PairSection = field(default_factory=PairSection)
    arch: ArchSection = field(default_factory=ArchSection)
    train: TrainSection = field(default_factory=TrainSection)
    blobs: BlobSection = field(default_factory=BlobSection)
    graph: GraphSection = field(default_factory=GraphSection)
    metrics: MetricSection = field(default_factory=MetricSection)

    def pair_config(self) -> PairConfig:
        return PairConfig(
            patch_size=self.patch_size,
            gap=self.pairs.gap,
            jitter_max=self.pairs.jitter_max,
            min_ink_ratio=self.pairs.min_ink_ratio,
            val_fraction=self.pairs.val_fraction,
        )

    def arch_config(self) -> ArchConfig:
        if self.arch.stages is None:
            stages = default_stages()
        else:
            stages = tuple(
                ConvStage(
                    filters=s["filters"],
                    kernel=s["kernel"],
                    stride=s.get("stride", 1),
                    padding=s.get("padding", 0),
                    pool=tuple(s["pool"]) if s.get("pool") else None,
                )
                for s in self.arch.stages
            )
        return ArchConfig(
            input_side=self.patch_size,
            stages=stages,
            head_widths=tuple(self.arch.head_widths),
            head_pool=tuple(self.arch.head_pool) if self.arch.head_pool else None,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.train.learning_rate,
            batch_size=self.train.batch_size,
            patience=self.train.patience,
            max_epochs=self.train.max_epochs,
            seed=self.seed,
        )

    def grid_config(self) -> GridConfig:
        return GridConfig(patch_size=self.patch_size, window=self.central_window)


_SECTIONS = {
    "synth": SynthSection,
    "pairs": PairSection,
    "arch": ArchSection,
    "train": TrainSection,
    "blobs": BlobSection,
    "graph": GraphSection,
    "metrics": MetricSection,
}


def _build(cls, data: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config key(s) at {path}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value) if key not in ("stages",) else value
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config root must be a mapping")
    return config_from_dict(data, str(path))


def config_from_dict(data: dict, origin: str = "<dict>") -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config key(s) at {origin}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"{origin}: section '{key}' must be a mapping")
            kwargs[key] = _build(_SECTIONS[key], value, f"{origin}:{key}")
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if hasattr(value, "__dataclass_fields__"):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    return value


def dump_config(cfg: RunConfig, path) -> None:
    """Write the fully resolved configuration next to a run's outputs."""
    data = _plain(cfg)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=True)
