"""Synthetic stochastic dynamical systems benchmark.

Trajectories of the Lorenz, Thomas and Hindmarsh-Rose systems are integrated
with a Stratonovich-Heun scheme under additive isotropic noise, then cut into
labelled, non-overlapping windows with a per-trial 70:15:15 split.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derive_seed, make_rng

DT = 1e-3
BURN_IN = 200
DIVERGENCE_BOUND = 1e6
MAX_RETRIES = 5
RMS_TRAJECTORIES = 3
RMS_STEPS = 20_000
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
SPLITS = ("train", "val", "test")


class Family(str, enum.Enum):
    LORENZ = "lorenz"
    THOMAS = "thomas"
    HINDMARSH_ROSE = "hindmarsh_rose"


class ConfigurationError(ValueError):
    pass


class IntegrationDiverged(RuntimeError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


# bifurcation sweeps
PARAMETER_GRIDS = {
    Family.LORENZ: ("rho", (28.0, 41.0, 55.0, 69.0, 83.0, 96.0, 110.0, 124.0, 138.0, 152.0)),
    Family.THOMAS: ("b", tuple(round(0.025 * k, 3) for k in range(1, 11))),
    Family.HINDMARSH_ROSE: ("I", (1.0, 1.33, 1.66, 2.0, 2.33, 2.66, 3.0, 3.33, 3.66, 4.0)),
}

FIXED_PARAMS = {
    Family.LORENZ: {"s": 28.0, "beta": 8.0 / 3.0},
    Family.THOMAS: {},
    Family.HINDMARSH_ROSE: {
        "a": 1.0, "b": 3.0, "c": 1.0, "d": 5.0, "r": 0.006, "s": 4.0, "x_R": -1.6,
    },
}

REQUIRED_PARAMS = {
    Family.LORENZ: {"s", "rho", "beta"},
    Family.THOMAS: {"b"},
    Family.HINDMARSH_ROSE: {"a", "b", "c", "d", "r", "s", "x_R", "I"},
}


@dataclass(frozen=True)
class SystemSpec:
    family: Family
    params: dict
    noise_level: float = 0.0
    dt: float = DT
    dims: int = 3

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.dt <= 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if self.noise_level < 0:
            raise ConfigurationError(f"noise level must be >= 0, got {self.noise_level}")
        missing = REQUIRED_PARAMS[self.family] - set(self.params)
        if missing:
            raise ConfigurationError(f"{self.family.value}: missing parameters {sorted(missing)}")

    @classmethod
    def from_grid(cls, family, value, noise_level=0.0, dt=DT):
        family = Family(family)
        name, _ = PARAMETER_GRIDS[family]
        return cls(family, {**FIXED_PARAMS[family], name: float(value)}, noise_level, dt)

    def noiseless(self):
        return SystemSpec(self.family, dict(self.params), 0.0, self.dt, self.dims)


@dataclass
class Trajectory:
    values: np.ndarray
    spec: SystemSpec
    seed: int
    burn_in_dropped: int = BURN_IN
    retries: int = 0


def drift(spec, y):
    """Right-hand side of the system ODE; ``y`` may carry leading batch axes."""
    y = np.asarray(y, dtype=np.float64)
    p = spec.params
    y1, y2, y3 = y[..., 0], y[..., 1], y[..., 2]
    if spec.family is Family.LORENZ:
        out = (p["s"] * (y2 - y1), y1 * (p["rho"] - y3) - y2, y1 * y2 - p["beta"] * y3)
    elif spec.family is Family.THOMAS:
        b = p["b"]
        out = (np.sin(y2) - b * y1, np.sin(y3) - b * y2, np.sin(y1) - b * y3)
    elif spec.family is Family.HINDMARSH_ROSE:
        out = (
            y2 - p["a"] * y1**3 + p["b"] * y1**2 - y3 + p["I"],
            p["c"] - p["d"] * y1**2 - y2,
            p["r"] * (p["s"] * (y1 - p["x_R"]) - y3),
        )
    else:  # pragma: no cover - Family() already validates
        raise ConfigurationError(f"unknown family {spec.family!r}")
    return np.stack(out, axis=-1)


def heun_path(f, y0, steps, dt, diffusion=0.0, rng=None, bound=DIVERGENCE_BOUND):
    """Stratonovich-Heun integration of ``dy = f(y) dt + diffusion dB``.

    Returns the ``steps`` states after ``y0`` (``y0`` itself excluded).  The
    Brownian increment is shared between predictor and corrector.
    """
    y = np.array(y0, dtype=np.float64)
    out = np.empty((steps,) + y.shape)
    if diffusion > 0:
        noise = rng.standard_normal((steps,) + y.shape) * (diffusion * np.sqrt(dt))
    else:
        noise = None
    for k in range(steps):
        fy = f(y)
        db = 0.0 if noise is None else noise[k]
        pred = y + fy * dt + db
        y = y + 0.5 * (fy + f(pred)) * dt + db
        if not np.all(np.abs(y) < bound):
            raise IntegrationDiverged(f"integration diverged at step {k}", step=k)
        out[k] = y
    return out


def rms(values):
    values = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean(values * values)))


def integrate(spec, y0, steps, rng_seed, diffusion=None):
    """Integrate ``spec`` from ``y0`` and drop the burn-in.

    ``diffusion`` is the absolute noise scale; by default it is
    ``noise_level * estimate_rms(spec)``.
    """
    if steps <= BURN_IN:
        raise ConfigurationError(f"steps must exceed the {BURN_IN}-step burn-in, got {steps}")
    if diffusion is None:
        diffusion = spec.noise_level * estimate_rms(spec) if spec.noise_level > 0 else 0.0
    rng = make_rng(rng_seed)
    path = heun_path(lambda y: drift(spec, y), y0, steps, spec.dt, diffusion, rng)
    return Trajectory(path[BURN_IN:], spec, rng_seed)


def simulate_trial(spec, steps, seed, diffusion=None):
    """Draw ``y0 ~ N(0, I)`` and integrate, redrawing on divergence."""
    if diffusion is None:
        diffusion = spec.noise_level * estimate_rms(spec) if spec.noise_level > 0 else 0.0
    for attempt in range(MAX_RETRIES + 1):
        sub = derive_seed(seed, "trial-attempt", attempt)
        y0 = make_rng(derive_seed(sub, "y0")).standard_normal(spec.dims)
        try:
            traj = integrate(spec, y0, steps, derive_seed(sub, "noise"), diffusion)
        except IntegrationDiverged:
            continue
        traj.seed = seed
        traj.retries = attempt
        return traj
    raise IntegrationDiverged(
        f"{spec.family.value} diverged on {MAX_RETRIES + 1} initial conditions", step=-1
    )


_RMS_CACHE = {}


def estimate_rms(spec, rng_seed=0, n_traj=RMS_TRAJECTORIES, steps=RMS_STEPS):
    """RMS amplitude of noiseless trajectories (all channels, post burn-in)."""
    clean = spec.noiseless()
    key = (clean.family, tuple(sorted(clean.params.items())), clean.dt, rng_seed, n_traj, steps)
    if key not in _RMS_CACHE:
        parts = [
            simulate_trial(clean, steps, derive_seed(rng_seed, "rms", k), diffusion=0.0).values
            for k in range(n_traj)
        ]
        _RMS_CACHE[key] = rms(np.concatenate(parts))
    return _RMS_CACHE[key]


# ---------------------------------------------------------------- datasets


@dataclass
class WindowDataset:
    windows: np.ndarray  # [N, W, M]
    labels: np.ndarray  # [N]
    split: np.ndarray  # [N] of "train" / "val" / "test"
    trial: np.ndarray  # [N] trial id
    start: np.ndarray  # [N] start index within the trial
    class_params: list
    config: dict = field(default_factory=dict)
    trial_seeds: list = field(default_factory=list)
    noise_scales: list = field(default_factory=list)

    @property
    def n_classes(self):
        return len(self.class_params)

    @property
    def window(self):
        return self.windows.shape[1]

    def subset(self, split):
        idx = np.flatnonzero(self.split == split)
        return self.windows[idx], self.labels[idx]

    def indices(self, split):
        return np.flatnonzero(self.split == split)

    @property
    def config_hash(self):
        return config_hash(self.config)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def split_bounds(length):
    a = int(np.floor(SPLIT_FRACTIONS[0] * length))
    b = int(np.floor((SPLIT_FRACTIONS[0] + SPLIT_FRACTIONS[1]) * length))
    return {"train": (0, a), "val": (a, b), "test": (b, length)}


def build_dataset(
    family,
    sigma,
    n_classes=5,
    W=100,
    trials_per_class=5,
    steps_per_trial=20_000,
    rng_seed=0,
    dt=DT,
):
    family = Family(family)
    if sigma < 0:
        raise ConfigurationError(f"noise level must be >= 0, got {sigma}")
    name, grid = PARAMETER_GRIDS[family]
    if n_classes > len(grid):
        raise ConfigurationError(f"{family.value} grid has only {len(grid)} values")
    length = steps_per_trial - BURN_IN
    shortest = min(hi - lo for lo, hi in split_bounds(length).values())
    if W > shortest:
        raise ConfigurationError(f"window {W} exceeds shortest split segment ({shortest} steps)")

    pick = make_rng(derive_seed(rng_seed, "class-params")).choice(len(grid), n_classes, replace=False)
    values = [grid[i] for i in sorted(pick)]
    config = {
        "family": family.value, "sigma": float(sigma), "n_classes": n_classes, "W": W,
        "trials_per_class": trials_per_class, "steps_per_trial": steps_per_trial,
        "seed": int(rng_seed), "dt": dt,
    }
    windows, labels, splits, trials, starts, seeds, scales = [], [], [], [], [], [], []
    for c, value in enumerate(values):
        spec = SystemSpec.from_grid(family, value, sigma, dt)
        diffusion = sigma * estimate_rms(spec) if sigma > 0 else 0.0
        scales.append(diffusion)
        for r in range(trials_per_class):
            tid = c * trials_per_class + r
            seed = derive_seed(rng_seed, "trial", c, r)
            seeds.append(seed)
            traj = simulate_trial(spec, steps_per_trial, seed, diffusion).values
            for split, (lo, hi) in split_bounds(length).items():
                for s in range(lo, hi - W + 1, W):
                    windows.append(traj[s : s + W])
                    labels.append(c)
                    splits.append(split)
                    trials.append(tid)
                    starts.append(s)
    return WindowDataset(
        windows=np.stack(windows),
        labels=np.array(labels, dtype=np.int64),
        split=np.array(splits),
        trial=np.array(trials, dtype=np.int64),
        start=np.array(starts, dtype=np.int64),
        class_params=[{name: v} for v in values],
        config=config,
        trial_seeds=seeds,
        noise_scales=scales,
    )


def regenerate_trial(dataset, trial_id):
    """Re-integrate one trial of ``dataset`` from its stored seed."""
    cfg = dataset.config
    c = trial_id // cfg["trials_per_class"]
    (name, value), = dataset.class_params[c].items()
    spec = SystemSpec.from_grid(cfg["family"], value, cfg["sigma"], cfg["dt"])
    return simulate_trial(
        spec, cfg["steps_per_trial"], dataset.trial_seeds[trial_id], dataset.noise_scales[c]
    ).values


# ---------------------------------------------------------------- file format

MAGIC = b"PULSEDS1"


def save_dataset(dataset, path):
    """Binary container: magic, u64 header length, JSON header, f64 LE windows."""
    header = {
        "shape": list(dataset.windows.shape),
        "labels": dataset.labels.tolist(),
        "split": dataset.split.tolist(),
        "trial": dataset.trial.tolist(),
        "start": dataset.start.tolist(),
        "class_params": dataset.class_params,
        "config": dataset.config,
        "config_hash": dataset.config_hash,
        "trial_seeds": [int(s) for s in dataset.trial_seeds],
        "noise_scales": [float(s) for s in dataset.noise_scales],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(dataset.windows.astype("<f8").tobytes())
    return path


def load_dataset(path):
    with Path(path).open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ConfigurationError(f"{path}: not a dataset file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        data = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return WindowDataset(
        windows=data.reshape(header["shape"]),
        labels=np.array(header["labels"], dtype=np.int64),
        split=np.array(header["split"]),
        trial=np.array(header["trial"], dtype=np.int64),
        start=np.array(header["start"], dtype=np.int64),
        class_params=header["class_params"],
        config=header["config"],
        trial_seeds=header["trial_seeds"],
        noise_scales=header["noise_scales"],
    )


def export_csv(dataset, directory):
    """One CSV per split, one row per window and time step."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    M = dataset.windows.shape[2]
    paths = []
    for split in SPLITS:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["window", "label", "trial", "start", "t"] + [f"y{m + 1}" for m in range(M)])
        for i in dataset.indices(split):
            for t, row in enumerate(dataset.windows[i]):
                w.writerow([i, dataset.labels[i], dataset.trial[i], dataset.start[i], t]
                           + [repr(float(v)) for v in row])
        p = directory / f"{split}.csv"
        p.write_text(buf.getvalue())
        paths.append(p)
    return paths
