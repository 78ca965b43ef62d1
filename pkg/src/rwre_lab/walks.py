"""Quenched and annealed walk laws, plus exact small-horizon oracles.

The quenched law steps through a fixed realized environment; the annealed law
averages the environment out. Everything here that is labelled exact is a full
enumeration or a forward transfer evolution, intended as ground truth for the
Monte Carlo machinery elsewhere in the package.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .environments import Box, Environment, IIDProductLaw, MarkovFieldLaw, centered_box, direction_vectors
from .numutil import BudgetError, fsum

PATH_BUDGET = 10**7


@dataclass(frozen=True)
class Path:
    """A nearest-neighbor path from a start site, stored as direction indices."""

    steps: tuple
    dimension: int
    start: tuple = None

    def __post_init__(self):
        if self.start is None:
            object.__setattr__(self, "start", (0,) * self.dimension)

    def __len__(self):
        return len(self.steps)

    @property
    def positions(self) -> np.ndarray:
        """Sites visited, shape (n+1, d), positions[0] == start."""
        vecs = direction_vectors(self.dimension)
        out = np.zeros((len(self.steps) + 1, self.dimension), dtype=np.int64)
        out[0] = self.start
        if self.steps:
            out[1:] = np.asarray(self.start) + np.cumsum(vecs[list(self.steps)], axis=0)
        return out

    @property
    def endpoint(self) -> tuple:
        return tuple(int(v) for v in self.positions[-1])


def check_path_budget(n: int, d: int, budget: int = PATH_BUDGET) -> int:
    count = (2 * d) ** n
    if count > budget:
        raise BudgetError(f"(2d)^n = {count} paths exceeds budget {budget}")
    return count


def enumerate_paths(n: int, d: int, budget: int = PATH_BUDGET):
    """All (2d)^n nearest-neighbor paths of length n from the origin, once each."""
    check_path_budget(n, d, budget)
    for steps in itertools.product(range(2 * d), repeat=n):
        yield Path(steps, d)


def step_matrix(n: int, d: int, budget: int = PATH_BUDGET) -> np.ndarray:
    """All step sequences as an int array of shape ((2d)^n, n)."""
    count = check_path_budget(n, d, budget)
    if n == 0:
        return np.zeros((1, 0), dtype=np.int8)
    grids = np.meshgrid(*([np.arange(2 * d, dtype=np.int8)] * n), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).reshape(count, n)


def positions_of(steps: np.ndarray, d: int, start=None) -> np.ndarray:
    """Positions for a batch of step sequences, shape (P, n+1, d)."""
    steps = np.asarray(steps)
    vecs = direction_vectors(d)
    pos = np.zeros((steps.shape[0], steps.shape[1] + 1, d), dtype=np.int64)
    if start is not None:
        pos[:, 0, :] = np.asarray(start, dtype=np.int64)
    np.cumsum(vecs[steps.astype(np.int64)], axis=1, out=pos[:, 1:, :])
    pos[:, 1:, :] += pos[:, :1, :]
    return pos


def simulate_quenched(env: Environment, start, n: int, rng_seed: int) -> Path:
    """Sample one quenched path of length n; reproducible for a fixed seed."""
    rng = np.random.default_rng(rng_seed)
    d = env.law.dimension
    pos = np.asarray(start, dtype=np.int64)
    vecs = direction_vectors(d)
    steps = []
    us = rng.random(n)
    for j in range(n):
        p = env.omega(pos)
        k = int(np.searchsorted(np.cumsum(p), us[j], side="right").clip(max=2 * d - 1))
        steps.append(k)
        pos = pos + vecs[k]
    return Path(tuple(steps), d, tuple(int(v) for v in np.asarray(start, dtype=np.int64)))


def quenched_path_weight(env: Environment, path: Path) -> float:
    """prod_j omega(X_{j-1}, step_j) in the fixed environment."""
    pos = path.positions
    w = 1.0
    for j, k in enumerate(path.steps):
        w *= float(env.omega(pos[j])[k])
    return w


def annealed_path_weight(law, path: Path) -> float:
    """E[prod_j omega(X_{j-1}, step_j)], exact.

    Repeated visits to a site do not factorize, so steps are grouped by site
    and each group is closed as one per-site moment.
    """
    if isinstance(law, IIDProductLaw):
        groups: dict = {}
        pos = path.positions
        for j, k in enumerate(path.steps):
            key = tuple(int(v) for v in pos[j])
            counts = groups.setdefault(key, np.zeros(2 * law.dimension, dtype=np.int64))
            counts[k] += 1
        w = 1.0
        for counts in groups.values():
            w *= law.site_moment(counts)
        return w
    if isinstance(law, MarkovFieldLaw):
        return _annealed_path_weight_field(law, path)
    raise TypeError(f"unsupported law type {type(law)!r}")


def _annealed_path_weight_field(law: MarkovFieldLaw, path: Path) -> float:
    """Exact annealed weight under a small-box field enumeration."""
    pos = path.positions
    radius = int(np.abs(pos).max()) if len(path.steps) else 0
    box = centered_box(law.dimension, radius)
    configs, sites, probs = law.gibbs_configurations(box)
    index = {tuple(s): i for i, s in enumerate(sites)}
    total = 0.0
    for config, p in zip(configs, probs):
        w = 1.0
        for j, k in enumerate(path.steps):
            w *= float(law.state_probs[config[index[tuple(int(v) for v in pos[j])]]][k])
        total += p * w
    return total


def quenched_point_probability(env: Environment, n: int, target, budget: int = PATH_BUDGET) -> float:
    """P_{0,omega}(X_n = target), exact by full path enumeration."""
    target = tuple(int(v) for v in np.atleast_1d(np.asarray(target, dtype=np.int64)))
    terms = [quenched_path_weight(env, p) for p in enumerate_paths(n, env.law.dimension, budget)
             if p.endpoint == target]
    return fsum(terms) if terms else 0.0


def annealed_point_probability(law, n: int, target, budget: int = PATH_BUDGET) -> float:
    """P_0(X_n = target), exact: sum over paths of the exact annealed weight."""
    target = tuple(int(v) for v in np.atleast_1d(np.asarray(target, dtype=np.int64)))
    terms = [annealed_path_weight(law, p) for p in enumerate_paths(n, law.dimension, budget)
             if p.endpoint == target]
    return fsum(terms) if terms else 0.0


def quenched_endpoint_distribution(env: Environment, n: int, budget: int = PATH_BUDGET) -> dict:
    """Endpoint law at time n by enumeration: {site tuple: probability}."""
    out: dict = {}
    for p in enumerate_paths(n, env.law.dimension, budget):
        out[p.endpoint] = out.get(p.endpoint, 0.0) + quenched_path_weight(env, p)
    return out


def endpoint_distribution_dp(env: Environment, n: int, start=None) -> tuple:
    """Quenched endpoint law by forward evolution; exact and cheap.

    Returns (grid, lo): grid holds probabilities on the centered box of radius
    n around the start, lo its lower corner. Independent of the enumeration
    route above, which it is tested against.
    """
    d = env.law.dimension
    start = np.zeros(d, dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64)
    box = Box(tuple(start - n), tuple(start + n))
    dense, lo = env.dense(box)
    grid = np.zeros(box.shape)
    grid[tuple(start - lo)] = 1.0
    vecs = direction_vectors(d)
    for _ in range(n):
        new = np.zeros_like(grid)
        for k in range(2 * d):
            flow = grid * dense[..., k]
            new += _shift(flow, vecs[k])
        grid = new
    return grid, lo


def log_point_probability_dp(env: Environment, n: int, target, start=None) -> float:
    """log P_{0,omega}(X_n = target) by scaled forward evolution.

    Rescales each step so horizons far beyond the enumeration budget stay in
    range; returns -inf for unreachable endpoints.
    """
    d = env.law.dimension
    start = np.zeros(d, dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64)
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    box = Box(tuple(start - n), tuple(start + n))
    dense, lo = env.dense(box)
    grid = np.zeros(box.shape)
    grid[tuple(start - lo)] = 1.0
    vecs = direction_vectors(d)
    logscale = 0.0
    for _ in range(n):
        new = np.zeros_like(grid)
        for k in range(2 * d):
            new += _shift(grid * dense[..., k], vecs[k])
        peak = new.max()
        if peak <= 0.0:
            return float("-inf")
        logscale += math.log(peak)
        grid = new / peak
    val = grid[tuple(target - lo)]
    return float("-inf") if val <= 0.0 else logscale + math.log(float(val))


def write_point_probabilities_csv(rows, path, header_comment: str = ""):
    """Serialize point-probability results as CSV rows (n, target, probability, stderr).

    ``rows`` holds (n, target, probability, stderr) tuples; stderr is empty for
    exact values.
    """
    import csv

    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(header_comment + "\n")
        w = csv.writer(fh)
        w.writerow(["n", "target", "probability", "stderr"])
        for n, target, prob, stderr in rows:
            tgt = " ".join(str(int(v)) for v in np.atleast_1d(np.asarray(target)))
            w.writerow([int(n), tgt, repr(float(prob)),
                        "" if stderr is None else repr(float(stderr))])


def log_mgf_dp(env: Environment, n: int, theta, start=None) -> float:
    """log E_{0,omega}[exp(<theta, X_n>)] by scaled forward evolution.

    Exact for the fixed environment; the per-step rescaling keeps strongly
    tilted runs inside floating-point range.
    """
    d = env.law.dimension
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    start = np.zeros(d, dtype=np.int64) if start is None else np.asarray(start, dtype=np.int64)
    box = Box(tuple(start - n), tuple(start + n))
    dense, lo = env.dense(box)
    vecs = direction_vectors(d)
    tilt = np.exp(vecs @ theta)
    grid = np.zeros(box.shape)
    grid[tuple(start - lo)] = 1.0
    logscale = 0.0
    for _ in range(n):
        new = np.zeros_like(grid)
        for k in range(2 * d):
            new += _shift(grid * dense[..., k] * tilt[k], vecs[k])
        peak = new.max()
        logscale += math.log(peak)
        grid = new / peak
    return logscale + math.log(float(grid.sum()))


def _shift(arr: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Shift an array by an integer offset, zero-filling (mass leaves the box)."""
    out = np.zeros_like(arr)
    src = []
    dst = []
    for v, size in zip(vec, arr.shape):
        v = int(v)
        if v >= 0:
            src.append(slice(0, size - v))
            dst.append(slice(v, size))
        else:
            src.append(slice(-v, size))
            dst.append(slice(0, size + v))
    out[tuple(dst)] = arr[tuple(src)]
    return out
