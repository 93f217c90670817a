"""Kuramoto oscillator demonstrations with known (possibly switching) coupling DAGs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

SCALES = {
    # name: (n_state, n_action)
    "kura5": (4, 1),
    "kura10": (8, 2),
    "kura50": (42, 8),
}
MODES = ("static", "vary")
SPLITS = ("train", "val", "test")


class SimulationError(RuntimeError):
    pass


@dataclass
class OscillatorSystem:
    omega: np.ndarray
    coupling: np.ndarray  # [j, i] = 1 means j drives i
    strength: float = 10.0
    dt: float = 0.05

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.coupling = np.asarray(self.coupling, dtype=np.float64)
        n = self.omega.shape[0]
        if self.coupling.shape != (n, n):
            raise ValueError(f"coupling must be {n}x{n}, got {self.coupling.shape}")
        if np.any(np.diag(self.coupling) != 0):
            raise ValueError("coupling diagonal must be zero")
        if self.dt <= 0 or self.strength < 0:
            raise ValueError("need dt > 0 and strength >= 0")

    @property
    def n(self) -> int:
        return self.omega.shape[0]

    def velocity(self, theta: np.ndarray, coupling: np.ndarray | None = None) -> np.ndarray:
        c = self.coupling if coupling is None else coupling
        # diff[j, i] = theta_j - theta_i
        diff = theta[:, None] - theta[None, :]
        return self.omega + (self.strength / self.n) * (c * np.sin(diff)).sum(axis=0)


def sample_dag(n: int, edge_prob: float, rng_seed) -> np.ndarray:
    """Random DAG: random node order, each forward pair kept with ``edge_prob``."""
    if n < 2:
        raise ValueError("need at least two nodes")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    order = rng.permutation(n)
    keep = rng.random((n, n)) < edge_prob
    adj = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            if keep[a, b]:
                adj[order[a], order[b]] = 1.0
    return adj


def simulate(system: OscillatorSystem, steps: int, init_phases,
             couplings: np.ndarray | None = None) -> np.ndarray:
    """RK4-integrate the phases; returns unwrapped phases, ``steps x n``.

    ``couplings`` optionally gives a per-step coupling matrix (``steps x n x n``);
    the matrix at index t drives the transition from t to t+1.
    """
    if steps < 2:
        raise ValueError("need at least two steps")
    theta = np.asarray(init_phases, dtype=np.float64).copy()
    out = np.empty((steps, system.n))
    out[0] = theta
    h = system.dt
    for t in range(1, steps):
        c = None if couplings is None else couplings[t - 1]
        with np.errstate(invalid="ignore", over="ignore"):
            k1 = system.velocity(theta, c)
            k2 = system.velocity(theta + 0.5 * h * k1, c)
            k3 = system.velocity(theta + 0.5 * h * k2, c)
            k4 = system.velocity(theta + h * k3, c)
            theta = theta + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(theta)):
            raise SimulationError(f"non-finite phase at step {t}")
        out[t] = theta
    return out


@dataclass
class DatasetConfig:
    scale: str = "kura5"
    mode: str = "static"
    seed: int = 0
    n_sequences: int = 500
    length: int = 100
    n_graphs: int = 3  # candidate graphs in vary mode
    edge_prob: float = 0.5
    strength: float = 10.0
    dt: float = 0.05
    omega_range: tuple[float, float] = (1.0, 3.0)
    segment_range: tuple[int, int] = (25, 50)
    split_ratio: tuple[float, float, float] = (2, 3, 5)

    def validate(self) -> None:
        if self.scale not in SCALES:
            raise ValueError(f"unknown scale {self.scale!r}; expected one of {sorted(SCALES)}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.n_sequences < 1 or self.length < 2:
            raise ValueError("need at least one sequence of length >= 2")
        if len(self.split_ratio) != 3 or min(self.split_ratio) < 0 or sum(self.split_ratio) <= 0:
            raise ValueError(f"bad split ratio {self.split_ratio}")


@dataclass
class TrajectoryDataset:
    scale: str
    mode: str
    n_state: int
    n_action: int
    gt_graphs: list[np.ndarray]
    states: list[np.ndarray]
    actions: list[np.ndarray]
    regimes: list[np.ndarray]
    splits: list[str]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.n_state + self.n_action

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def node_names(self) -> list[str]:
        return ([f"s{i + 1}" for i in range(self.n_state)]
                + [f"a{i + 1}" for i in range(self.n_action)])

    def validate(self) -> None:
        m = len(self.gt_graphs)
        for s, a, r in zip(self.states, self.actions, self.regimes):
            if s.shape[1] != self.n_state or a.shape[1] != self.n_action:
                raise ValueError("state/action dimensions differ between sequences")
            if s.shape[0] != a.shape[0] or r.shape[0] != s.shape[0]:
                raise ValueError("sequence arrays have different lengths")
            if r.min() < 0 or r.max() >= m:
                raise ValueError("regime label does not index a ground-truth graph")
        if self.mode == "static" and m != 1:
            raise ValueError("static dataset must carry exactly one graph")


def _segments(rng: np.random.Generator, length: int, lo: int, hi: int) -> list[int]:
    """Contiguous run lengths covering ``length``, each in [lo, hi]."""
    runs: list[int] = []
    remaining = length
    while remaining > hi:
        # keep the tail feasible: whatever is left must itself be >= lo
        top = min(hi, remaining - lo)
        runs.append(int(rng.integers(lo, top + 1)))
        remaining -= runs[-1]
    if remaining < lo and runs:
        # only reachable when length < lo overall
        runs[-1] += remaining
    else:
        runs.append(remaining)
    return runs


def _assign_splits(n: int, ratio, rng: np.random.Generator) -> list[str]:
    ratio = np.asarray(ratio, dtype=float)
    counts = np.floor(n * ratio / ratio.sum()).astype(int)
    counts[-1] = n - counts[:-1].sum()
    labels = np.repeat(np.arange(3), counts)
    labels = labels[rng.permutation(n)]
    return [SPLITS[k] for k in labels]


def make_dataset(config: DatasetConfig) -> TrajectoryDataset:
    config.validate()
    n_state, n_action = SCALES[config.scale]
    n = n_state + n_action
    master = np.random.default_rng(config.seed)
    n_graphs = 1 if config.mode == "static" else config.n_graphs
    graphs = [sample_dag(n, config.edge_prob, master) for _ in range(n_graphs)]
    splits = _assign_splits(config.n_sequences, config.split_ratio, master)

    states, actions, regimes = [], [], []
    for idx in range(config.n_sequences):
        rng = np.random.default_rng(config.seed + idx)
        omega = rng.uniform(*config.omega_range, size=n)
        theta0 = rng.uniform(0.0, 2.0 * math.pi, size=n)
        if config.mode == "static":
            labels = np.zeros(config.length, dtype=int)
        else:
            runs = _segments(rng, config.length, *config.segment_range)
            labels = np.concatenate([np.full(r, rng.integers(n_graphs)) for r in runs])
        system = OscillatorSystem(omega, graphs[0], config.strength, config.dt)
        couplings = np.stack([graphs[k] for k in labels])
        phases = simulate(system, config.length, theta0, couplings)
        feats = np.sin(phases)
        states.append(feats[:, :n_state])
        actions.append(feats[:, n_state:])
        regimes.append(labels.astype(int))

    ds = TrajectoryDataset(config.scale, config.mode, n_state, n_action, graphs,
                           states, actions, regimes, splits, config.seed)
    ds.validate()
    return ds


# --- JSON-lines file format ----------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _matrix(a) -> str:
    a = np.asarray(a)
    if a.ndim == 1:
        return "[" + ",".join(_fmt(v) if a.dtype.kind == "f" else str(int(v)) for v in a) + "]"
    return "[" + ",".join(_matrix(row) for row in a) + "]"


def write_dataset(ds: TrajectoryDataset, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "scale": ds.scale,
        "mode": ds.mode,
        "n_state": ds.n_state,
        "n_action": ds.n_action,
        "M_truth": len(ds.gt_graphs),
        "seed": ds.seed,
    }
    head = json.dumps(header, sort_keys=True)
    # splice gt_graphs in with fixed float formatting
    head = head[:-1] + ', "gt_graphs": [' + ",".join(
        _matrix(np.asarray(g, dtype=float)) for g in ds.gt_graphs) + "]}"
    lines = [head]
    for s, a, r, sp in zip(ds.states, ds.actions, ds.regimes, ds.splits):
        lines.append('{"states": %s, "actions": %s, "regimes": %s, "split": "%s"}'
                     % (_matrix(s), _matrix(a), _matrix(np.asarray(r, dtype=int)), sp))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> TrajectoryDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format {header.get('format_version')!r}")
        states, actions, regimes, splits = [], [], [], []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            states.append(np.asarray(rec["states"], dtype=float).reshape(-1, header["n_state"]))
            actions.append(np.asarray(rec["actions"], dtype=float).reshape(-1, header["n_action"]))
            regimes.append(np.asarray(rec["regimes"], dtype=int))
            if rec["split"] not in SPLITS:
                raise ValueError(f"unknown split {rec['split']!r}")
            splits.append(rec["split"])
    ds = TrajectoryDataset(header["scale"], header["mode"], header["n_state"], header["n_action"],
                           [np.asarray(g, dtype=float) for g in header["gt_graphs"]],
                           states, actions, regimes, splits, header.get("seed", 0))
    ds.validate()
    return ds
