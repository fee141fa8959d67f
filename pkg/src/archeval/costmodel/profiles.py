"""Device latency profiles stored as editable JSON files."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

PROFILE_DIR_ENV = "SEVAL_PROFILE_DIR"
BUILTIN_PROFILE_DIR = Path(__file__).with_name("profiles")
DEVICE_NAMES = ("edgegpu", "edgetpu", "eyeriss", "fpga", "pixel3", "raspi4")


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    coefficients: dict[str, float] = field(hash=False)
    per_node_overhead_ms: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        bad = {k: v for k, v in self.coefficients.items() if not v > 0}
        if bad:
            raise ValueError(f"profile {self.name!r}: coefficients must be > 0, got {bad}")
        if self.per_node_overhead_ms < 0:
            raise ValueError(f"profile {self.name!r}: per_node_overhead_ms must be >= 0")
        if not 0.0 <= self.noise_sigma <= 0.2:
            raise ValueError(f"profile {self.name!r}: noise_sigma must lie in [0, 0.2]")

    def scaled(self, factor: float) -> "DeviceProfile":
        """Copy with every per-op coefficient multiplied by ``factor``."""
        return DeviceProfile(self.name, {k: v * factor for k, v in self.coefficients.items()},
                             self.per_node_overhead_ms, self.noise_sigma)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "coefficients_ms_per_mflop": dict(sorted(self.coefficients.items())),
            "per_node_overhead_ms": self.per_node_overhead_ms,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        return cls(
            name=d["name"],
            coefficients={k: float(v) for k, v in d["coefficients_ms_per_mflop"].items()},
            per_node_overhead_ms=float(d.get("per_node_overhead_ms", 0.0)),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
        )


def profile_dir(path=None) -> Path:
    if path is not None:
        return Path(path)
    env = os.environ.get(PROFILE_DIR_ENV)
    return Path(env) if env else BUILTIN_PROFILE_DIR


def load_profile(path) -> DeviceProfile:
    with open(path, encoding="utf-8") as fh:
        return DeviceProfile.from_dict(json.load(fh))


def load_profiles(path=None) -> dict[str, DeviceProfile]:
    """All ``*.json`` profiles in a directory, keyed by name (sorted)."""
    directory = profile_dir(path)
    files = sorted(directory.glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no device profiles (*.json) in {directory}")
    profiles = {}
    for f in files:
        p = load_profile(f)
        if p.name in profiles:
            raise ValueError(f"duplicate profile name {p.name!r} in {directory}")
        profiles[p.name] = p
    return dict(sorted(profiles.items()))
