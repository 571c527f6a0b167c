"""Linear software power model: calibration by least squares and per-process energy attribution.

Power is modeled as ``beta0 + sum_f beta_f * x_f`` where the features ``x_f`` are
normalized utilizations: cpu as a machine-wide fraction, memory in GiB,
disk and network throughput in MiB/s, and I/O rate in thousands of ops/s.
The constant ``beta0`` is idle/base power and is never split among processes.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from wattline.records import ProcessIdentity, ResourceUsage

GIB = float(1 << 30)
MIB = float(1 << 20)

FEATURES: tuple[str, ...] = ("cpu", "mem", "disk", "net", "io")

# feature -> (usage attribute, divisor)
_NORMALIZATION = {
    "cpu": ("cpu_fraction", 1.0),
    "mem": ("memory_bytes", GIB),
    "disk": ("disk_bytes_per_s", MIB),
    "net": ("network_bytes_per_s", MIB),
    "io": ("io_ops_per_s", 1000.0),
}

TRACE_COLUMNS = (
    "cpu_fraction",
    "memory_bytes",
    "disk_bytes_per_s",
    "network_bytes_per_s",
    "io_ops_per_s",
    "measured_power_w",
)


class CalibrationError(ValueError):
    pass


class SingularDesignError(CalibrationError):
    def __init__(self, features: Sequence[str]):
        self.features = tuple(features)
        super().__init__(f"singular design: feature(s) {', '.join(self.features)} "
                         "are constant or collinear across samples")


class InsufficientSamplesError(CalibrationError):
    pass


class CalibrationWarning(UserWarning):
    pass


def normalized(usage: ResourceUsage, feature: str) -> float:
    attr, divisor = _NORMALIZATION[feature]
    value = getattr(usage, attr)
    return 0.0 if value is None else value / divisor


def parse_mask(spec: str | Iterable[str]) -> frozenset[str]:
    names = [s.strip() for s in spec.split(",")] if isinstance(spec, str) else list(spec)
    names = [n for n in names if n]
    bad = [n for n in names if n not in FEATURES]
    if bad:
        raise ValueError(f"unknown feature(s): {', '.join(bad)}; expected {', '.join(FEATURES)}")
    return frozenset(names)


@dataclass(frozen=True)
class PowerModel:
    beta0: float
    beta_cpu: float = 0.0
    beta_mem: float = 0.0
    beta_disk: float = 0.0
    beta_net: float = 0.0
    beta_io: float = 0.0
    feature_mask: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "feature_mask", parse_mask(self.feature_mask))
        for f in FEATURES:
            if f not in self.feature_mask and self.coef(f) != 0.0:
                raise ValueError(f"beta_{f} must be 0 when {f} is not in the feature mask")
        if not self.beta0 >= 0:
            raise ValueError("beta0 must be >= 0")

    def coef(self, feature: str) -> float:
        return getattr(self, f"beta_{feature}")

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(f for f in FEATURES if f in self.feature_mask)

    def negative_coefficients(self) -> list[str]:
        return [f for f in self.features if self.coef(f) < 0]

    def to_text(self) -> str:
        lines = [f"beta0={self.beta0!r}"]
        lines += [f"beta_{f}={self.coef(f)!r}" for f in FEATURES]
        lines.append(f"mask={','.join(self.features)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> PowerModel:
        values: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: expected key=value")
            values[key.strip()] = value.strip()
        if "beta0" not in values:
            raise ValueError("model file has no beta0")
        known = {"beta0", "mask"} | {f"beta_{f}" for f in FEATURES}
        extra = sorted(set(values) - known)
        if extra:
            raise ValueError(f"unknown key(s) in model file: {', '.join(extra)}")
        kwargs = {k: float(v) for k, v in values.items() if k != "mask"}
        return cls(feature_mask=parse_mask(values.get("mask", "")), **kwargs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> PowerModel:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class CalibrationSample:
    usage: ResourceUsage
    measured_power_w: float

    def __post_init__(self):
        if not (math.isfinite(self.measured_power_w) and self.measured_power_w > 0):
            raise ValueError("measured_power_w must be finite and > 0")


def dynamic_power(model: PowerModel, usage: ResourceUsage) -> float:
    """Power above idle attributable to ``usage``."""
    return math.fsum(model.coef(f) * normalized(usage, f) for f in model.features)


def predict(model: PowerModel, usage: ResourceUsage) -> float:
    """Modeled power in watts."""
    return model.beta0 + dynamic_power(model, usage)


def _design(samples: Sequence[CalibrationSample], features: Sequence[str]) -> np.ndarray:
    X = np.ones((len(samples), len(features) + 1))
    for j, f in enumerate(features, 1):
        X[:, j] = [normalized(s.usage, f) for s in samples]
    return X


def _dependent_columns(X: np.ndarray, features: Sequence[str]) -> list[str]:
    """Features whose column adds no rank given the intercept and earlier columns."""
    bad = []
    kept = X[:, :1]
    for j, f in enumerate(features, 1):
        trial = np.hstack([kept, X[:, j : j + 1]])
        if np.linalg.matrix_rank(trial) <= kept.shape[1]:
            bad.append(f)
        else:
            kept = trial
    return bad


def fit(samples: Sequence[CalibrationSample], mask: Iterable[str]) -> PowerModel:
    """Ordinary least-squares fit of a :class:`PowerModel` over the features in ``mask``.

    Solves the normal equations after checking the design matrix has full
    column rank. Raises :class:`InsufficientSamplesError` when there are fewer
    samples than parameters and :class:`SingularDesignError` (naming the
    offending features) when the design is rank deficient. Negative fitted
    coefficients are kept and reported with a :class:`CalibrationWarning`.
    """
    features = [f for f in FEATURES if f in parse_mask(mask)]
    n_params = len(features) + 1
    if len(samples) < n_params:
        raise InsufficientSamplesError(
            f"insufficient samples: need at least {n_params}, got {len(samples)}")
    X = _design(samples, features)
    y = np.array([s.measured_power_w for s in samples], dtype=float)

    # Scale columns so the rank test and solve are not dominated by units.
    scale = np.max(np.abs(X), axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    if np.linalg.matrix_rank(Xs) < n_params:
        raise SingularDesignError(_dependent_columns(Xs, features) or features)

    A = Xs.T @ Xs
    b = Xs.T @ y
    beta = np.linalg.solve(A, b)
    # one step of iterative refinement against the normal-equation residual
    beta = beta + np.linalg.solve(A, b - A @ beta)
    beta = beta / scale

    coefs = {f"beta_{f}": float(v) for f, v in zip(features, beta[1:])}
    beta0 = float(beta[0])
    if -1e-9 < beta0 < 0:
        beta0 = 0.0  # rounding noise around a zero intercept
    if beta0 < 0:
        raise CalibrationError(f"fitted idle power is negative ({beta0:.6g} W)")
    model = PowerModel(beta0=beta0, feature_mask=frozenset(features), **coefs)
    neg = model.negative_coefficients()
    if neg:
        warnings.warn(f"negative fitted coefficient(s) for {', '.join(neg)}",
                      CalibrationWarning, stacklevel=2)
    return model


def attribute(
    model: PowerModel,
    per_process: Sequence[tuple[ProcessIdentity, ResourceUsage]],
    dt: float,
) -> tuple[list[tuple[ProcessIdentity, float]], float]:
    """Split modeled energy over ``dt`` seconds among processes.

    Returns ``(per_process_energy_j, idle_energy_j)``. Each process gets the
    dynamic part of the model applied to its own usage; idle energy is
    ``dt * beta0`` and is reported separately.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    energies = [(ident, dt * dynamic_power(model, usage)) for ident, usage in per_process]
    return energies, dt * model.beta0


# ---------------------------------------------------------------------------
# calibration trace files


def write_trace(samples: Iterable[CalibrationSample], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for s in samples:
        u = s.usage
        w.writerow([repr(float(v or 0.0)) for v in (
            u.cpu_fraction, u.memory_bytes, u.disk_bytes_per_s,
            u.network_bytes_per_s, u.io_ops_per_s)] + [repr(float(s.measured_power_w))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_trace(path: str | Path) -> list[CalibrationSample]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(TRACE_COLUMNS):
            raise ValueError(f"{path}: expected header {','.join(TRACE_COLUMNS)}")
        samples = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(TRACE_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(TRACE_COLUMNS)} columns")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
            usage = ResourceUsage(*vals[:5])
            bad = usage.violations()
            if bad:
                raise ValueError(f"{path}:{lineno}: {bad[0]}")
            try:
                samples.append(CalibrationSample(usage, vals[5]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return samples
