"""Instantaneous CO2 models: analytic oracle, trajectory-pair dataset,
surrogate networks with clamped cached inference.

The analytic model is the in-repo ground truth (documented in
docs/emissions.md) from which supervised datasets are generated; surrogates
are one-hidden-layer networks keyed by (vehicle type, fuel, age bucket).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ecodrive import nn
from ecodrive.util import substream

MODEL_MAGIC = b"ECOEMOD1"

VEHICLE_TYPES = ("passenger_car", "passenger_truck", "bus", "truck")
FUELS = ("gasoline", "diesel")
AGE_BUCKETS = tuple(range(1, 12))  # 1..10 years plus 11 == "10+"

Key = tuple[str, str, int]
DEFAULT_KEY: Key = ("passenger_car", "gasoline", 1)

SIM_DT_S = 0.5

# Base g/s rate coefficients for a gasoline passenger car:
#   rate = max(0, c0 + c1*v + c2*v^2 + c3*v^3 + c4*max(0, v*a) + c5*v*grade)
# scaled by vehicle type / fuel factors and an age degradation multiplier,
# then by the temperature/humidity multiplier. Table published in
# docs/emissions.md; keep both in sync.
BASE_COEFFS = (1.2, 0.045, 0.003, 0.00025, 0.20, 0.010)

VEHICLE_TYPE_FACTOR = {
    "passenger_car": 1.00,
    "passenger_truck": 1.35,
    "bus": 2.60,
    "truck": 2.20,
}
FUEL_FACTOR = {"gasoline": 1.00, "diesel": 0.93}

AGE_STEP = 0.015       # per year of age beyond the first
AGE_CAP_MULTIPLIER = 1.18  # bucket 11 == vehicles older than 10 years

ENV_TEMP_COEFF = 1e-4   # per degC^2 from 20 degC
ENV_HUM_COEFF = 2e-5    # per pct^2 from 50 %


@dataclass(frozen=True)
class EmissionQuery:
    velocity: float       # m/s
    acceleration: float   # m/s^2
    road_grade: float = 0.0   # percent
    temperature_c: float = 20.0
    humidity_pct: float = 50.0

    def validate(self) -> None:
        if self.velocity < 0:
            raise ValueError("velocity must be >= 0")

    def features(self) -> np.ndarray:
        return np.array([self.velocity, self.acceleration, self.road_grade,
                         self.temperature_c, self.humidity_pct])


def all_keys() -> list[Key]:
    return [(t, f, a) for t in VEHICLE_TYPES for f in FUELS for a in AGE_BUCKETS]


def age_multiplier(age_bucket: int) -> float:
    if not 1 <= age_bucket <= 11:
        raise ValueError(f"age bucket {age_bucket} outside 1..11")
    if age_bucket == 11:
        return AGE_CAP_MULTIPLIER
    return 1.0 + AGE_STEP * (age_bucket - 1)


def key_coefficients(key: Key) -> tuple[float, ...]:
    vtype, fuel, age = key
    scale = VEHICLE_TYPE_FACTOR[vtype] * FUEL_FACTOR[fuel] * age_multiplier(age)
    return tuple(scale * c for c in BASE_COEFFS)


def env_multiplier(temperature_c: float, humidity_pct: float) -> float:
    return (1.0 + ENV_TEMP_COEFF * (temperature_c - 20.0) ** 2
            + ENV_HUM_COEFF * (humidity_pct - 50.0) ** 2)


def oracle_rate(q: EmissionQuery, key: Key = DEFAULT_KEY) -> float:
    """Ground-truth CO2 rate in g/s."""
    q.validate()
    c0, c1, c2, c3, c4, c5 = key_coefficients(key)
    v, a, g = q.velocity, q.acceleration, q.road_grade
    base = c0 + c1 * v + c2 * v * v + c3 * v ** 3 + c4 * max(0.0, v * a) + c5 * v * g
    return max(0.0, base) * env_multiplier(q.temperature_c, q.humidity_pct)


def oracle_emission(q: EmissionQuery, key: Key = DEFAULT_KEY, dt: float = SIM_DT_S) -> float:
    """Ground-truth grams of CO2 for one simulation step."""
    return oracle_rate(q, key) * dt


def _rate_batch(X: np.ndarray, key: Key) -> np.ndarray:
    c0, c1, c2, c3, c4, c5 = key_coefficients(key)
    v, a, g, T, H = (X[:, i] for i in range(5))
    base = c0 + c1 * v + c2 * v * v + c3 * v ** 3 + c4 * np.maximum(0.0, v * a) + c5 * v * g
    env = 1.0 + ENV_TEMP_COEFF * (T - 20.0) ** 2 + ENV_HUM_COEFF * (H - 50.0) ** 2
    return np.maximum(0.0, base) * env


# ---------------------------------------------------------------------------
# Trajectory pairs

@dataclass(frozen=True)
class TrajectoryPair:
    """Constant-speed base trajectory plus the same prefix with one extra step."""

    base_velocity: float
    extra_velocity: float
    steps: int = 10

    def base(self) -> np.ndarray:
        return np.full(self.steps, self.base_velocity)

    def controlled(self) -> np.ndarray:
        return np.append(self.base(), self.extra_velocity)


def trajectory_emission(velocities: np.ndarray, key: Key, grade: float = 0.0,
                        temperature_c: float = 20.0, humidity_pct: float = 50.0,
                        dt: float = SIM_DT_S) -> float:
    """Total grams over a velocity sequence; per-step accel from differences."""
    v = np.asarray(velocities, dtype=float)
    a = np.zeros_like(v)
    a[1:] = (v[1:] - v[:-1]) / dt
    total = 0.0
    for vi, ai in zip(v, a):
        total += oracle_emission(EmissionQuery(vi, ai, grade, temperature_c, humidity_pct), key, dt)
    return total


def pair_label(pair: TrajectoryPair, key: Key, grade: float = 0.0,
               temperature_c: float = 20.0, humidity_pct: float = 50.0,
               dt: float = SIM_DT_S) -> float:
    """Attributable grams of the extra step: controlled minus base emissions."""
    return (trajectory_emission(pair.controlled(), key, grade, temperature_c, humidity_pct, dt)
            - trajectory_emission(pair.base(), key, grade, temperature_c, humidity_pct, dt))


def sample_query_grid(count: int, seed: int, dt: float = SIM_DT_S) -> np.ndarray:
    """Random (v, a, grade, T, H) covering the operating envelope.

    Acceleration is constrained so the pre-step velocity v - a*dt stays
    nonnegative, keeping every query realizable as a trajectory pair.
    """
    rng = substream(seed, "emission-query-grid")
    v = rng.uniform(0.0, 30.0, count)
    a = rng.uniform(-4.5, 3.0, count)
    a = np.minimum(a, v / dt)  # keep v - a*dt >= 0
    grade = rng.uniform(-8.0, 8.0, count)
    temp = rng.uniform(-10.0, 40.0, count)
    hum = rng.uniform(20.0, 95.0, count)
    return np.column_stack([v, a, grade, temp, hum])


def build_dataset(keys: list[Key], queries: np.ndarray, steps: int = 10,
                  dt: float = SIM_DT_S) -> dict[Key, tuple[np.ndarray, np.ndarray]]:
    """Supervised (features, labels) per key: label = controlled-trajectory
    emissions minus constant-speed base-trajectory emissions.

    Each query (v, a, grade, T, H) becomes a pair whose base runs at
    v - a*dt for `steps` steps and whose controlled copy appends one step at v.
    """
    X = np.asarray(queries, dtype=float)
    n_q = len(X)
    v, a = X[:, 0], X[:, 1]
    v_prev = v - a * dt
    if np.any(v_prev < -1e-12):
        raise ValueError("queries must satisfy v - a*dt >= 0 (realizable pairs)")
    v_prev = np.maximum(0.0, v_prev)

    # per-step feature rows for both trajectories of every pair
    def traj_rows(vel: np.ndarray, acc: np.ndarray) -> np.ndarray:
        cols = np.repeat(X[:, 2:], vel.shape[1], axis=0)
        return np.column_stack([vel.ravel(), acc.ravel(), cols])

    vel_b = np.tile(v_prev[:, None], (1, steps))
    acc_b = np.zeros_like(vel_b)
    vel_c = np.column_stack([vel_b, v])
    acc_c = np.column_stack([acc_b, a])

    out = {}
    for key in keys:
        base = _rate_batch(traj_rows(vel_b, acc_b), key).reshape(n_q, steps).sum(axis=1) * dt
        ctrl = _rate_batch(traj_rows(vel_c, acc_c), key).reshape(n_q, steps + 1).sum(axis=1) * dt
        out[key] = (X, ctrl - base)
    return out


# ---------------------------------------------------------------------------
# Surrogate model

HIDDEN_UNITS = 32
# Training setup (paper leaves these open): full-batch Adam converges well on
# this smooth low-dimensional target and keeps runs bit-deterministic.
TRAIN_ITERS = 1500
TRAIN_LR = 0.02


class TrainingFailure(RuntimeError):
    """Surrogate failed to reach the required held-out fit quality."""

    def __init__(self, key: Key, r2: float, threshold: float):
        super().__init__(f"surrogate for {key} reached R^2 {r2:.4f} < {threshold}")
        self.key = key
        self.r2 = r2
        self.threshold = threshold


@dataclass
class EmissionModel:
    """One-hidden-layer surrogate with input/output normalization and clamp."""

    key: Key
    net: nn.MLP
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    holdout_r2: float = float("nan")
    cache_enabled: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        z = (X - self.x_mean) / self.x_std
        raw = self.net.forward(z)[:, 0] * self.y_std + self.y_mean
        return np.maximum(0.0, raw)

    def predict(self, q: EmissionQuery) -> float:
        q.validate()
        key = (q.velocity, q.acceleration, q.road_grade, q.temperature_c, q.humidity_pct)
        if self.cache_enabled:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        value = float(self.predict_batch(q.features()[None, :])[0])
        if self.cache_enabled and len(self._cache) < 1_000_000:
            self._cache[key] = value
        return value


def _r2(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")


def train_surrogate(dataset: tuple[np.ndarray, np.ndarray], key: Key, seed: int = 0,
                    r2_threshold: float = 0.98, iters: int = TRAIN_ITERS,
                    lr: float = TRAIN_LR) -> EmissionModel:
    """Fit the surrogate for one key; raises TrainingFailure below threshold."""
    X, y = dataset
    if len(X) < 1000:
        raise ValueError(f"need >= 1000 samples per key, got {len(X)}")
    rng = substream(seed, "emission-surrogate", key[0], key[1], key[2])
    n = len(X)
    perm = rng.permutation(n)
    n_val = max(1, n // 10)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    x_mean = X[train_idx].mean(axis=0)
    x_std = X[train_idx].std(axis=0) + 1e-12
    y_mean = float(y[train_idx].mean())
    y_std = float(y[train_idx].std() + 1e-12)
    Xt = (X[train_idx] - x_mean) / x_std
    yt = (y[train_idx] - y_mean) / y_std

    net = nn.MLP([5, HIDDEN_UNITS, 1], rng)
    opt = nn.Adam(net.parameters(), lr=lr)
    for it in range(iters):
        cache: list = []
        pred = net.forward(Xt, cache)[:, 0]
        grad = ((pred - yt) * (2.0 / len(yt)))[:, None]
        grads = net.backward(cache, grad)
        flat_grads = [g for pair in grads for g in pair]
        opt.step(flat_grads, lr_scale=0.1 ** (it // (iters // 2 + 1)))

    model = EmissionModel(key=key, net=net, x_mean=x_mean, x_std=x_std,
                          y_mean=y_mean, y_std=y_std)
    r2 = _r2(y[val_idx], model.predict_batch(X[val_idx]))
    model.holdout_r2 = r2
    if r2 < r2_threshold:
        raise TrainingFailure(key, r2, r2_threshold)
    return model


# ---------------------------------------------------------------------------
# Binary model files: magic, u32 header length, JSON header, flat f64 body (LE)

def save_model(model: EmissionModel, path: Path) -> None:
    header = {
        "key": list(model.key),
        "layers": model.net.sizes,
        "x_mean": model.x_mean.tolist(),
        "x_std": model.x_std.tolist(),
        "y_mean": model.y_mean,
        "y_std": model.y_std,
        "holdout_r2": model.holdout_r2,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    body = model.net.flatten().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(body)


def load_model(path: Path) -> EmissionModel:
    raw = Path(path).read_bytes()
    if raw[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not an emission model file (bad magic {raw[:8]!r})")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode())
    flat = np.frombuffer(raw[12 + hlen:], dtype="<f8")
    rng = np.random.default_rng(0)  # shape-only init, overwritten below
    net = nn.MLP(header["layers"], rng)
    net.load_flat(flat.copy())
    model = EmissionModel(
        key=tuple(header["key"][:2]) + (int(header["key"][2]),),
        net=net,
        x_mean=np.array(header["x_mean"]),
        x_std=np.array(header["x_std"]),
        y_mean=header["y_mean"],
        y_std=header["y_std"],
        holdout_r2=header.get("holdout_r2", float("nan")),
    )
    return model


def model_filename(key: Key) -> str:
    return f"emod_{key[0]}_{key[1]}_age{key[2]:02d}.bin"


# ---------------------------------------------------------------------------
# Emitters: the single interface the simulator consumes

class OracleEmitter:
    """Serves the analytic model directly (no surrogate required)."""

    def step_emission(self, key: Key, v: float, a: float, grade: float,
                      temperature_c: float, humidity_pct: float, dt: float = SIM_DT_S) -> float:
        return oracle_emission(EmissionQuery(v, a, grade, temperature_c, humidity_pct), key, dt)


class SurrogateEmitter:
    """Serves trained surrogate models, one per fleet key."""

    def __init__(self, models: dict[Key, EmissionModel]):
        self.models = models

    @classmethod
    def load_dir(cls, directory: Path) -> "SurrogateEmitter":
        models = {}
        for path in sorted(Path(directory).glob("emod_*.bin")):
            model = load_model(path)
            models[model.key] = model
        if not models:
            raise FileNotFoundError(f"no emission model files in {directory}")
        return cls(models)

    def step_emission(self, key: Key, v: float, a: float, grade: float,
                      temperature_c: float, humidity_pct: float, dt: float = SIM_DT_S) -> float:
        # model labels are per-step grams at the simulation step size
        model = self.models[key]
        return model.predict(EmissionQuery(v, a, grade, temperature_c, humidity_pct)) * (dt / SIM_DT_S)
