from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

__all__ = ["ArchSpec", "PRESETS"]


@dataclass(frozen=True)
class ArchSpec:
    """RepLKNet family descriptor: per-stage blocks ``B``, widths ``C``, kernels ``K``."""

    B: tuple
    C: tuple
    K: tuple
    small_kernel: Optional[int] = 5
    ffn_ratio: float = 4.0
    dw_expansion: float = 1.0
    in_channels: int = 3
    num_classes: int = 1000
    with_head: bool = True

    def __post_init__(self):
        for key in ("B", "C", "K"):
            val = tuple(int(v) for v in getattr(self, key))
            if len(val) != 4:
                raise ValueError(f"{key} needs 4 entries, got {val}")
            object.__setattr__(self, key, val)
        if min(self.B) < 1 or min(self.C) < 1:
            raise ValueError("block counts and widths must be >= 1")
        if any(k < 1 or k % 2 == 0 for k in self.K):
            raise ValueError(f"kernel sizes must be odd, got {self.K}")
        if self.small_kernel is not None:
            if self.small_kernel % 2 == 0 or self.small_kernel < 1:
                raise ValueError(f"small_kernel must be odd, got {self.small_kernel}")
            if self.small_kernel >= min(self.K):
                raise ValueError(f"small_kernel {self.small_kernel} must be < min(K) = {min(self.K)}")
        for c in self.C:
            if abs(c * self.dw_expansion - round(c * self.dw_expansion)) > 1e-9:
                raise ValueError(f"dw_expansion {self.dw_expansion} * {c} is not integral")
            if round(c * self.ffn_ratio) < 1:
                raise ValueError("ffn_ratio leaves no hidden channels")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ValueError("in_channels and num_classes must be >= 1")

    def dw_channels(self, stage: int) -> int:
        return int(round(self.C[stage] * self.dw_expansion))

    def ffn_channels(self, stage: int) -> int:
        return int(round(self.C[stage] * self.ffn_ratio))

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("B", "C", "K"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ArchSpec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ArchSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def with_kernels(self, K: Sequence[int], small_kernel="keep") -> "ArchSpec":
        small = self.small_kernel if small_kernel == "keep" else small_kernel
        d = self.to_dict()
        d.update(K=list(K), small_kernel=small)
        return ArchSpec.from_dict(d)


_BASE = dict(B=(2, 2, 18, 2), C=(128, 256, 512, 1024))

PRESETS = {
    "replknet-31b": ArchSpec(K=(31, 29, 27, 13), **_BASE),
    "replknet-3": ArchSpec(K=(3, 3, 3, 3), small_kernel=None, **_BASE),
    "replknet-7": ArchSpec(K=(7, 7, 7, 7), **_BASE),
    "replknet-13": ArchSpec(K=(13, 13, 13, 13), **_BASE),
    "replknet-25": ArchSpec(K=(25, 25, 25, 13), **_BASE),
    "replknet-31l": ArchSpec(B=(2, 2, 18, 2), C=(192, 384, 768, 1536), K=(31, 29, 27, 13)),
    # re-param branch omitted for XL, as in its large-data training recipe
    "replknet-xl": ArchSpec(B=(2, 2, 18, 2), C=(256, 512, 1024, 2048), K=(27, 27, 27, 13),
                            small_kernel=None, dw_expansion=1.5),
    "replknet-tiny": ArchSpec(B=(1, 1, 1, 1), C=(16, 32, 64, 128), K=(13, 13, 13, 13),
                              small_kernel=5, num_classes=10),
}
