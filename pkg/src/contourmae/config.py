"""Run configuration: one JSON file covering data, contour, model, re-id.

Unknown keys are rejected by name so typos fail loudly instead of silently
falling back to defaults. Value ranges are checked by the section dataclasses
themselves.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass

from .data import SyntheticSpec
from .imagecore import ContourStackParams
from .mae import MAEConfig
from .reid import ReidConfig


@dataclass
class ContourConfig:
    kernel_scale: float = 0.05
    pool_size: int = 3
    threshold: object = "mean"   # "mean" or a numeric level
    isolated_keep_value: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kernel_scale <= 0.0:
            raise ValueError(f"kernel_scale must be positive, got {self.kernel_scale}")
        if self.pool_size < 1 or self.pool_size % 2 == 0:
            raise ValueError(f"pool_size must be odd and >= 1, got {self.pool_size}")
        if self.threshold != "mean" and not isinstance(self.threshold, (int, float)):
            raise ValueError(
                f"threshold must be 'mean' or a number, got {self.threshold!r}"
            )

    def stack_params(self) -> ContourStackParams:
        return ContourStackParams.from_seed(self.seed, self.kernel_scale, self.pool_size)


_SECTIONS = {
    "data": SyntheticSpec,
    "contour": ContourConfig,
    "mae": MAEConfig,
    "reid": ReidConfig,
}


def _build_section(cls, name: str, raw: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ValueError(f"unknown key {key!r} in config section {name!r}")
    return cls(**raw)


@dataclass
class RunConfig:
    data: SyntheticSpec
    contour: ContourConfig
    mae: MAEConfig
    reid: ReidConfig

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(
            data=SyntheticSpec(),
            contour=ContourConfig(),
            mae=MAEConfig(),
            reid=ReidConfig(),
        )

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        for key in raw:
            if key not in _SECTIONS:
                raise ValueError(
                    f"unknown config section {key!r}, expected one of "
                    f"{sorted(_SECTIONS)}"
                )
        parts = {}
        for name, section_cls in _SECTIONS.items():
            parts[name] = _build_section(section_cls, name, raw.get(name, {}))
        return cls(**parts)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config root must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every section reseeded from one root value."""
        return RunConfig(
            data=dataclasses.replace(self.data, seed=seed),
            contour=dataclasses.replace(self.contour, seed=seed),
            mae=dataclasses.replace(self.mae, seed=seed),
            reid=dataclasses.replace(self.reid, seed=seed),
        )
