"""Rate parameters shared by the simulators and the spectral code."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

VARIANTS = ("standard", "modified-edge-isolation", "growth-only")


class ValidationError(ValueError):
    """Invalid user input (bad rates, sizes, domains)."""


class ResourceCapError(RuntimeError):
    """A configured size or population cap was exceeded."""


@dataclass(frozen=True)
class Params:
    """Rates of the process.

    ``beta`` is the infection rate per active vertex, ``theta`` the detection
    rate per active vertex and ``gamma`` the edge-loss rate per open edge.
    In the modified variant a cluster of size n is isolated at rate
    ``theta * (n - 1)`` instead of ``theta * n``.

    Zero rates are accepted here so that the spectral code can study
    degenerate corners; simulators call :meth:`require_simulable`.
    """

    beta: float
    theta: float
    gamma: float
    variant: str = "standard"

    def __post_init__(self):
        for name in ("beta", "theta", "gamma"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ValidationError(f"{name} must be a real number, got {value!r}")
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"{name} must be finite and nonnegative, got {value}")
            object.__setattr__(self, name, float(value))
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "growth-only" and (self.theta != 0 or self.gamma != 0):
            raise ValidationError("growth-only variant forces theta = gamma = 0")

    @classmethod
    def growth_only(cls, beta: float) -> "Params":
        return cls(beta, 0.0, 0.0, "growth-only")

    def require_simulable(self) -> None:
        if self.beta <= 0:
            raise ValidationError("beta must be positive for simulation")
        if self.variant != "growth-only" and (self.theta <= 0 or self.gamma <= 0):
            raise ValidationError(
                f"{self.variant} simulation needs strictly positive rates, got {self.rates}")

    @property
    def rates(self) -> tuple[float, float, float]:
        return (self.beta, self.theta, self.gamma)

    @property
    def modified(self) -> bool:
        return self.variant == "modified-edge-isolation"

    def scaled(self, rho: float) -> "Params":
        return Params(rho * self.beta, rho * self.theta, rho * self.gamma, self.variant)

    def replace(self, **changes) -> "Params":
        data = asdict(self)
        data.update(changes)
        return Params(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def cluster_rate(self, n: int) -> float:
        """Total event rate of one active cluster of size ``n``."""
        iso = self.theta * (n - 1) if self.modified else self.theta * n
        return self.beta * n + iso + self.gamma * (n - 1)


def param_hash(payload: dict) -> str:
    """Stable short hash of a JSON-serialisable payload."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
