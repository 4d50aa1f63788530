"""Plain-text ``key = value`` run configuration."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Tuple

from .solvers import VARIANTS, SolverConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # problem
    operator: str = "identity"
    noise_sigma: float = 0.1
    lam: float = field(default=0.05, metadata={"key": "lambda"})
    rho: float = 0.0
    blur_size: int = 5
    blur_sigma: float = 1.0
    mask_keep: float = 0.4
    # regularizer
    layers: int = 4
    channels: int = 8
    init_scale: float = 1.0
    # solver
    variant: str = "control_flow"
    T: int = 15
    tau: float = 0.2
    eta: float = 0.2
    K: int = 50
    paper_literal_signs: bool = False
    backtrack: int = 4
    seed: int = 0
    # dataset
    n_train: int = 8
    n_test: int = 4
    size: int = 32
    n_shapes: int = 4
    # benchmark
    benchmark_T: Tuple[int, ...] = (4, 16, 64)
    benchmark_K: int = 3
    # output
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.operator not in ("identity", "blur", "mask"):
            raise ConfigError(f"operator must be identity, blur or mask, got {self.operator!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if self.T < 0 or self.K < 1 or self.n_train < 1 or self.size < 8:
            raise ConfigError("T >= 0, K >= 1, n_train >= 1 and size >= 8 are required")
        if self.benchmark_K < 1 or not self.benchmark_T or min(self.benchmark_T) < 1:
            raise ConfigError("benchmark_K >= 1 and a nonempty list of positive benchmark_T are required")

    def solver(self) -> SolverConfig:
        try:
            return SolverConfig(
                T=self.T, tau=self.tau, eta=self.eta, K=self.K, variant=self.variant,
                paper_literal_signs=self.paper_literal_signs, seed=self.seed,
                backtrack=self.backtrack,
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def to_text(self, include_output: bool = True) -> str:
        lines = []
        for f in fields(self):
            if f.name == "output_dir" and not include_output:
                continue
            lines.append(f"{_key(f)} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        """SHA-256 over every setting except the output directory."""
        return hashlib.sha256(self.to_text(include_output=False).encode()).digest()


def _key(f) -> str:
    return f.metadata.get("key", f.name)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(f, raw: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("Tuple"):
            return tuple(int(s) for s in raw.split(",") if s.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {_key(f)!r}: {raw!r}") from None


def parse_config(text: str, **overrides) -> RunConfig:
    by_key = {_key(f): f for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in by_key:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        f = by_key[key]
        values[f.name] = _parse_value(f, raw)
    values.update(overrides)
    return RunConfig(**values)


def load_config(path, **overrides) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config(text, **overrides)
