"""Run configuration: a flat, sectioned INI file mapped onto :class:`RunConfig`."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .compression import CompressionSpec
from .learning import ModelSpec

__all__ = ["ALGORITHMS", "ConfigError", "RunConfig", "load_config", "dump_config"]

ALGORITHMS = ("tcs_h", "tcs_d", "top_k")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending option."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _opt(default, section, **kw):
    return field(default=default, metadata={"section": section, **kw})


@dataclass(frozen=True)
class RunConfig:
    # [run]
    algorithm: str = _opt("tcs_h", "run")
    seed: int = _opt(0, "run")
    max_rounds: int = _opt(200, "run")
    slot_budget: int = _opt(20000, "run")
    target_accuracy: Optional[float] = _opt(None, "run")
    # [system]
    n_devices: int = _opt(20, "system")
    n_subchannels: int = _opt(25, "system")
    p_bar: float = _opt(5.0, "system")
    alpha: float = _opt(1.0, "system")
    sigma_t: float = _opt(5.0, "system")
    noise_var: float = _opt(1e-6, "system")
    n_scheduled_digital: int = _opt(13, "system")
    # [training]
    local_steps: int = _opt(10, "training")
    batch_size: int = _opt(64, "training")
    eta: float = _opt(0.05, "training")
    # [compression]
    k_global: int = _opt(200, "compression")
    k_local: int = _opt(50, "compression")
    q: int = _opt(16, "compression")
    # [data]
    partition: str = _opt("iid", "data")
    classes_per_device: int = _opt(2, "data")
    num_classes: int = _opt(10, "data")
    input_dim: int = _opt(20, "data")
    hidden: tuple = _opt((32,), "data")
    n_train: int = _opt(4000, "data")
    n_test: int = _opt(1000, "data")
    separation: float = _opt(3.0, "data")
    train_csv: Optional[str] = _opt(None, "data")
    test_csv: Optional[str] = _opt(None, "data")

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.validate()

    @property
    def model(self) -> ModelSpec:
        return ModelSpec((self.input_dim, *self.hidden, self.num_classes))

    @property
    def d(self) -> int:
        return self.model.d

    @property
    def compression(self) -> CompressionSpec:
        return CompressionSpec(self.k_global, self.k_local, self.q, self.d)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def __hash__(self):
        return hash(self.digest())

    def validate(self) -> None:
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(key, msg)

        need(self.algorithm in ALGORITHMS, "algorithm", f"must be one of {ALGORITHMS}")
        need(self.max_rounds >= 1, "max_rounds", "must be >= 1")
        need(self.slot_budget >= 1, "slot_budget", "must be >= 1")
        if self.target_accuracy is not None:
            need(0 < self.target_accuracy <= 1, "target_accuracy", "must be in (0, 1]")
        need(self.n_devices >= 1, "n_devices", "must be >= 1")
        need(self.n_subchannels >= self.n_devices, "n_subchannels",
             "must be >= n_devices (one sub-channel per scheduled device)")
        need(self.p_bar > 0, "p_bar", "must be positive")
        need(self.alpha > 0, "alpha", "must be positive")
        need(self.sigma_t > 0, "sigma_t", "must be positive")
        need(self.noise_var >= 0, "noise_var", "must be nonnegative")
        need(0 <= self.n_scheduled_digital <= self.n_devices, "n_scheduled_digital",
             "must be in [0, n_devices]; 0 means 'match the hybrid run' (compare only)")
        need(self.local_steps >= 1, "local_steps", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.eta > 0, "eta", "must be positive")
        need(2 <= self.q <= 52, "q", "must be in [2, 52]")
        need(self.k_global >= 0, "k_global", "must be nonnegative")
        need(self.k_local >= 0, "k_local", "must be nonnegative")
        need(self.k_local < 2 ** (2 * self.q - 2), "k_local",
             f"compression-bound precondition k_local < 2^(2q-2) = {2 ** (2 * self.q - 2)} violated")
        need(self.partition in ("iid", "label_skew"), "partition", "must be iid or label_skew")
        need(self.num_classes >= 2, "num_classes", "must be >= 2")
        need(1 <= self.classes_per_device <= self.num_classes, "classes_per_device",
             "must be in [1, num_classes]")
        if self.partition == "label_skew":
            need(self.classes_per_device * self.n_devices >= self.num_classes, "classes_per_device",
                 "classes_per_device * n_devices must cover every class")
        need(self.input_dim >= 1 and all(h >= 1 for h in self.hidden), "hidden", "widths must be >= 1")
        need(self.k_global + self.k_local <= self.d, "k_global",
             f"k_global + k_local must not exceed the model dimension {self.d}")
        need(self.k_global + self.k_local >= 1, "k_global", "k_global + k_local must be >= 1")
        if self.train_csv is None:
            need(self.n_train >= self.num_classes, "n_train", "need one sample per class")
            need(self.batch_size <= self.n_train // self.n_devices, "batch_size",
                 "must not exceed the per-device shard size n_train / n_devices")
        need(self.n_test >= 1 or self.test_csv is not None, "n_test", "must be >= 1")
        need(self.separation >= 0, "separation", "must be nonnegative")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    default = f.default
    try:
        if name == "hidden":
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        if raw.lower() in ("none", "") and name in ("target_accuracy", "train_csv", "test_csv"):
            return None
        if name in ("target_accuracy",):
            return float(raw)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(name, f"cannot parse {raw!r}: {exc}") from None


def load_config(path: str | Path | None = None, text: str | None = None, **overrides) -> RunConfig:
    """Parse an INI file (or ``text``) into a validated :class:`RunConfig`.

    Unknown sections or keys are rejected, as are keys placed in the wrong
    section. ``overrides`` replace parsed values before validation.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        if text is not None:
            cp.read_string(text)
        else:
            with open(path) as fh:
                cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc)) from None
    values = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if key not in _FIELDS:
                raise ConfigError(key, f"unknown option in [{section}]")
            want = _FIELDS[key].metadata["section"]
            if want != section:
                raise ConfigError(key, f"belongs in [{want}], found in [{section}]")
            values[key] = _parse_value(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError("<file>", str(exc)) from None


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Serialize every option, grouped by section, in declaration order."""
    sections: dict[str, list[str]] = {}
    for f in dataclasses.fields(RunConfig):
        sections.setdefault(f.metadata["section"], []).append(
            f"{f.name} = {_fmt(getattr(cfg, f.name))}"
        )
    buf = io.StringIO()
    for name, lines in sections.items():
        buf.write(f"[{name}]\n" + "\n".join(lines) + "\n\n")
    return buf.getvalue()
