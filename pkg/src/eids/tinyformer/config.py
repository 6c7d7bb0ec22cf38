from __future__ import annotations

from dataclasses import asdict, dataclass, fields

PE_KINDS = ("none", "sin", "fourier", "rope", "dyn_sin", "dyn_fourier", "dyn_rope")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 448
    N: int = 30
    d_m: int = 8
    L: int = 1
    h: int = 4
    d_h: int = 8
    d_ff: int = 16
    p_drop: float = 0.1
    c: int = 6
    pe_kind: str = "dyn_sin"
    norm_style: str = "post"
    time_scale: float = 1.0
    theta_base: float = 10000.0
    rope_style: str = "model"
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if self.pe_kind not in PE_KINDS:
            raise ValueError(f"pe_kind must be one of {PE_KINDS}, got {self.pe_kind!r}")
        if self.norm_style != "post":
            raise ValueError("only post-norm blocks are supported")
        for name in ("d", "N", "d_m", "L", "h", "d_h", "d_ff", "c"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.d_m % 2:
            raise ValueError("d_m must be even")
        if self.pe_kind in ("rope", "dyn_rope") and self.d_h % 2:
            raise ValueError("rotary encodings need an even head dimension")
        if not 0 <= self.p_drop < 1:
            raise ValueError("p_drop must lie in [0, 1)")

    @property
    def inner(self) -> int:
        """Width of the concatenated attention heads."""
        return self.h * self.d_h

    @property
    def dynamic(self) -> bool:
        return self.pe_kind.startswith("dyn_")

    @property
    def pe_family(self) -> str:
        return self.pe_kind.removeprefix("dyn_")

    def is_reference(self) -> bool:
        ref = REFERENCE
        return all(getattr(self, k) == getattr(ref, k)
                   for k in ("d", "N", "d_m", "L", "h", "d_h", "d_ff", "c"))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


REFERENCE = ModelConfig()
REFERENCE_PARAM_COUNT = 5086
