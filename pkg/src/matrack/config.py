"""Model configuration and validation."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


@dataclass(frozen=True)
class ModelConfig:
    # geometry
    search_size: int = 256
    template_size: int = 128
    patch: int = 16
    # backbone
    dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    # prediction head
    head_channels: int = 32
    # AKTG
    aktg_enabled: bool = True
    aktg_tau: float = 1.0
    aktg_hard: bool = False
    # "column" scales attention keys by the activation map (default);
    # "row" scales queries; "elementwise" broadcasts over rows.
    aktg_map_mode: str = "column"
    # MHB cross-attention
    ca_residual: bool = True
    share_template_ca: bool = False
    # NTC
    ntc_dim: int = 32
    theta_low: float = 0.3
    theta_high: float = 0.8
    # tracking
    template_context: float = 2.0
    search_context: float = 4.0
    window_penalty: float = 0.0

    def __post_init__(self):
        problems = []
        if self.depth < 1:
            problems.append(f"depth must be >= 1, got {self.depth}")
        if self.dim % self.heads != 0:
            problems.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.patch % 2 != 0:
            problems.append(f"patch side must be even (half-stride O-patches), got {self.patch}")
        if self.search_size % self.patch != 0:
            problems.append(f"search size {self.search_size} not divisible by patch {self.patch}")
        if self.template_size % self.patch != 0:
            problems.append(
                f"template size {self.template_size} not divisible by patch {self.patch}"
            )
        if not (0.0 < self.theta_low < self.theta_high < 1.0):
            problems.append(
                f"need 0 < theta_low < theta_high < 1, got ({self.theta_low}, {self.theta_high})"
            )
        if self.aktg_tau <= 0:
            problems.append(f"aktg_tau must be positive, got {self.aktg_tau}")
        if self.aktg_map_mode not in ("column", "row", "elementwise"):
            problems.append(f"unknown aktg_map_mode {self.aktg_map_mode!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    # derived geometry -------------------------------------------------------

    @property
    def search_grid(self) -> int:
        return self.search_size // self.patch

    @property
    def template_grid(self) -> int:
        return self.template_size // self.patch

    @property
    def search_tokens(self) -> int:
        return self.search_grid**2

    @property
    def search_tokens_overlap(self) -> int:
        return (self.search_grid - 1) ** 2

    @property
    def template_tokens(self) -> int:
        return self.template_grid**2

    @property
    def template_tokens_overlap(self) -> int:
        return (self.template_grid - 1) ** 2

    @property
    def total_tokens(self) -> int:
        return (
            self.search_tokens
            + self.search_tokens_overlap
            + 2 * self.template_tokens
            + 2 * self.template_tokens_overlap
        )

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Small configuration used for finite-difference checks and fast tests."""
        base = dict(
            search_size=64,
            template_size=32,
            patch=8,
            dim=32,
            heads=2,
            depth=2,
            mlp_ratio=2,
            head_channels=12,
            ntc_dim=16,
        )
        base.update(overrides)
        return cls(**base)

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def parse_config_file(path: str) -> dict[str, object]:
    """Parse a plain-text key=value config file into typed override values.

    Blank lines and lines starting with '#' are ignored.  Keys must be
    ModelConfig field names; values are coerced to the field's type.
    """
    types = {f.name: f.type for f in fields(ModelConfig)}
    out: dict[str, object] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            t = types[key]
            if t in ("int", int):
                out[key] = int(val)
            elif t in ("float", float):
                out[key] = float(val)
            elif t in ("bool", bool):
                out[key] = val.lower() in ("1", "true", "yes", "on")
            else:
                out[key] = val
    return out
