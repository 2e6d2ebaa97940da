"""Run configuration: every tunable constant in one JSON-serialisable record.

Sections mirror the modules. Loading validates each section by building
the corresponding module config, so a bad value fails before any data is
touched.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .brm import BrmConfig
from .errors import ConfigError
from .fileio import atomic_write_text
from .lgte import LgteConfig
from .mgfn import MdcmConfig
from .synth import SynthConfig
from .tbr import TbrConfig
from .train import MgfnVariant, OptimConfig, TcaTrainConfig, WeakConfig


@dataclass
class LgteSection:
    groups: int = 8
    local_groups: int = 4
    window: int = 9
    layers: int = 2
    ffn_hidden: Optional[int] = None
    literal_scale: bool = False
    mask_padding: bool = False


@dataclass
class TbrSection:
    hidden: int = 128
    kernel: int = 3
    start_len: int = 8
    center_len: int = 16
    end_len: int = 8
    context_ratio: float = 0.25
    tau: float = 0.5
    head: str = "span"
    stages: int = 2
    jitter: float = 0.3
    proposals_per_gt: int = 4


@dataclass
class MgfnSection:
    width: int = 256
    rates: Tuple[int, ...] = (1, 2, 3, 5)
    cascade: bool = True
    transfer: bool = True
    theta: float = 0.5
    loc_threshold: float = 0.5
    class_threshold: float = 0.5
    top_k: int = 1
    lambda_mmd: float = 0.1
    source_epochs: int = 30
    nms_threshold: float = 0.5


@dataclass
class BrmSection:
    enabled: bool = True
    width: int = 128
    layers: int = 3
    scales: Tuple[float, ...] = (4.0, 8.0, 16.0, 32.0)
    gamma: float = 0.25
    outer: str = "ring"
    min_length: float = 2.0
    epochs: int = 30
    warmup: int = 1
    reg: float = 0.01
    lr: Optional[float] = None


@dataclass
class RunConfig:
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)
    lgte: LgteSection = field(default_factory=LgteSection)
    tbr: TbrSection = field(default_factory=TbrSection)
    mgfn: MgfnSection = field(default_factory=MgfnSection)
    brm: BrmSection = field(default_factory=BrmSection)
    synth: SynthConfig = field(default_factory=SynthConfig)

    # -- module configs -----------------------------------------------------

    def lgte_config(self, channels: int) -> Optional[LgteConfig]:
        s = self.lgte
        if s.layers == 0:
            return None
        return LgteConfig(channels, s.groups, s.local_groups, s.window, s.ffn_hidden, s.layers,
                          s.literal_scale, s.mask_padding)

    def tbr_config(self, channels: int) -> TbrConfig:
        s = self.tbr
        return TbrConfig(channels, s.hidden, s.kernel, s.start_len, s.center_len, s.end_len,
                         s.context_ratio, s.tau, s.head)

    def tca_train_config(self) -> TcaTrainConfig:
        return TcaTrainConfig(jitter=self.tbr.jitter, proposals_per_gt=self.tbr.proposals_per_gt)

    def mdcm_config(self, channels: int, num_classes: int) -> MdcmConfig:
        return MdcmConfig(channels, num_classes, self.mgfn.width, rates=self.mgfn.rates)

    def brm_config(self, channels: int) -> BrmConfig:
        b = self.brm
        return BrmConfig(channels, b.width, 3, b.layers, b.scales, b.gamma, b.outer, b.min_length)

    def variant(self) -> MgfnVariant:
        m = self.mgfn
        return MgfnVariant(m.rates, m.cascade, m.transfer, self.brm.enabled)

    def weak_config(self, channels: int) -> WeakConfig:
        m, b = self.mgfn, self.brm
        return WeakConfig(width=m.width, theta=m.theta, loc_threshold=m.loc_threshold,
                          class_threshold=m.class_threshold, top_k=m.top_k, lambda_mmd=m.lambda_mmd,
                          brm=self.brm_config(channels), brm_epochs=b.epochs, brm_warmup=b.warmup,
                          brm_lr=b.lr, brm_reg=b.reg, source_epochs=m.source_epochs,
                          nms_threshold=m.nms_threshold)

    # -- validation and I/O ---------------------------------------------------

    def validate(self) -> "RunConfig":
        o = self.optim
        if o.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {o.optimizer!r}")
        if o.lr <= 0 or o.epochs < 0 or o.batch_size < 1:
            raise ConfigError("optim: lr must be positive, epochs non-negative, batch_size >= 1")
        if self.tbr.stages < 1:
            raise ConfigError("tbr.stages must be at least 1")
        if not 0.0 < self.mgfn.theta <= 1.0:
            raise ConfigError(f"mgfn.theta must lie in (0, 1], got {self.mgfn.theta}")
        if not 0.0 < self.mgfn.nms_threshold < 1.0:
            raise ConfigError("mgfn.nms_threshold must lie in (0, 1)")
        if self.mgfn.lambda_mmd < 0:
            raise ConfigError("mgfn.lambda_mmd must be non-negative")
        if self.lgte.layers < 0 or self.lgte.groups < 1:
            raise ConfigError("lgte: layers must be non-negative and groups positive")
        self.lgte_config(self.lgte.groups)  # channel divisibility is checked against the data
        self.tbr_config(self.synth.channels)
        self.mdcm_config(self.synth.channels, self.synth.num_classes)
        self.brm_config(self.synth.channels)
        self.synth.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return _build(cls, data, "config").validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    default = cls()
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        current = getattr(default, name)
        if is_dataclass(current):
            value = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
