"""Model configuration: one validated record covering every module's knobs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

FUSION_MODES = ("none", "eaf", "sdi", "tdee")


@dataclass
class ModelConfig:
    embed_dim: int = 256  # shared feature/embedding width
    vit_dim: int = 64  # spatial branch token width
    vas_heads: int = 8
    vas_scale: float = 1.0
    vas_offset: float = 0.0
    n_queries: int = 100
    decoder_layers: int = 3
    decoder_heads: int = 8
    ffn_expansion: int = 4
    dda_kernel_size: int = 3  # m, odd
    tdee_dim: int = 256  # d, even; fusion/router halves are d/2 wide
    sdi_kernel_size: int = 3
    sdi_rank: int = 4
    vit_heads: int = 4
    backbone_widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    fusion: str = "tdee"
    alpha: float = 0.4
    beta: float = 0.8
    tau: float = 0.07
    ensemble_method: str = "geometric"
    score_floor: float = 0.0
    weights_seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.vas_heads:
            raise ValueError(
                f"config: embed_dim {self.embed_dim} not divisible by vas_heads {self.vas_heads}"
            )
        if self.embed_dim % self.decoder_heads:
            raise ValueError(
                f"config: embed_dim {self.embed_dim} not divisible by decoder_heads "
                f"{self.decoder_heads}"
            )
        if self.vit_dim % self.vit_heads:
            raise ValueError(
                f"config: vit_dim {self.vit_dim} not divisible by vit_heads {self.vit_heads}"
            )
        if self.dda_kernel_size % 2 == 0:
            raise ValueError(f"config: dda_kernel_size must be odd, got {self.dda_kernel_size}")
        if self.sdi_kernel_size % 2 == 0:
            raise ValueError(f"config: sdi_kernel_size must be odd, got {self.sdi_kernel_size}")
        if self.tdee_dim % 2 or self.tdee_dim < 2:
            raise ValueError(f"config: tdee_dim must be even and >= 2, got {self.tdee_dim}")
        if self.decoder_layers < 1 or self.n_queries < 1:
            raise ValueError("config: decoder_layers and n_queries must be >= 1")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"config: fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.beta <= 1.0:
            raise ValueError("config: alpha and beta must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError(f"config: tau must be positive, got {self.tau}")
        if self.ensemble_method not in ("geometric", "arithmetic"):
            raise ValueError(f"config: unknown ensemble_method {self.ensemble_method!r}")
        if len(self.backbone_widths) != 4:
            raise ValueError("config: backbone_widths must list four stage widths")
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hash(self, extra: dict | None = None) -> str:
        """Stable short hash over the canonical config (plus optional context)."""
        payload = self.to_dict()
        if extra:
            payload = {**payload, **extra}
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]
