"""Product decomposition of the auxiliary walk with forcing symbols.

The auxiliary walk with step law u is rewritten as a two-layer mechanism: an
i.i.d. symbol sequence over the alphabet {directions} + {free}, where each
direction symbol carries probability kbar and forces the walk to take that
step, and the free symbol (probability 1 - 2d*kbar) lets the walk move with
the leftover law (u(e) - kbar) / (1 - 2d*kbar). The per-step marginal is u
again, so the two mechanisms generate identical walk laws; the point of the
rewrite is that runs of forced symbols create stretches where the walk moves
deterministically, which the stopping machinery below exploits.

``psi_factor`` is the per-step reweighting that restores the environment
dependence inside the decomposed mechanism; its defining property, checked by
exact enumeration in the tests, is that summing it against the symbol and step
laws reproduces u(e) * xi(x, e).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .environments import Environment, IIDProductLaw, direction_index
from .numutil import BudgetError, fsum
from .tilting import TiltParams
from .walks import Path, enumerate_paths

TAU_HORIZON = 10**7


@dataclass(frozen=True)
class EpsilonLaw:
    """Product law of the forcing symbols.

    Each of the 2d direction symbols has probability kbar; the free symbol has
    probability 1 - 2d*kbar. Validity against a step law u (0 < kbar < min u,
    2d*kbar < 1, both strict) is checked by ``validate_against``.
    """

    kbar: float
    dimension: int

    def __post_init__(self):
        if not (0.0 < self.kbar and 2 * self.dimension * self.kbar < 1.0):
            raise ValueError(f"kbar = {self.kbar} must satisfy 0 < 2d*kbar < 1")

    @property
    def free_symbol(self) -> int:
        return 2 * self.dimension

    @property
    def free_prob(self) -> float:
        return 1.0 - 2 * self.dimension * self.kbar

    def symbol_probs(self) -> np.ndarray:
        """Probabilities over the alphabet, directions first, free last."""
        out = np.full(2 * self.dimension + 1, self.kbar)
        out[-1] = self.free_prob
        return out

    def validate_against(self, tp: TiltParams):
        if self.dimension != tp.dimension:
            raise ValueError("dimension mismatch")
        if self.kbar >= tp.c_z:
            raise ValueError(f"kbar = {self.kbar} must be < min_e u(e) = {tp.c_z}")


def default_kbar(tp: TiltParams) -> float:
    """min(1/(4d), min_e u(e)/2): keeps both strictness constraints with margin."""
    return min(1.0 / (4 * tp.dimension), tp.c_z / 2.0)


def make_epsilon_law(tp: TiltParams, kbar: float | None = None) -> EpsilonLaw:
    eps = EpsilonLaw(default_kbar(tp) if kbar is None else float(kbar), tp.dimension)
    eps.validate_against(tp)
    return eps


@dataclass(frozen=True)
class StoppingConfig:
    """Block length L and the forced direction for run completion."""

    L: int
    ell: int  # direction index

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.ell < 0:
            raise ValueError("ell must be a direction index")

    @classmethod
    def from_vector(cls, L: int, ell_vec) -> "StoppingConfig":
        return cls(int(L), direction_index(ell_vec))


def validate_stopping(tp: TiltParams, cfg: StoppingConfig):
    """The forced direction must have positive projection on the drift."""
    from .environments import direction_vectors

    zdot = float(direction_vectors(tp.dimension)[cfg.ell] @ np.asarray(tp.z))
    if zdot <= 0.0:
        raise ValueError(f"<z, ell> = {zdot} must be > 0")


def conditional_step_probs(tp: TiltParams, eps: EpsilonLaw, symbol: int) -> np.ndarray:
    """Step law given one symbol: forced for directions, leftover for free."""
    d = tp.dimension
    if symbol < 2 * d:
        out = np.zeros(2 * d)
        out[symbol] = 1.0
        return out
    return (tp.u_array - eps.kbar) / eps.free_prob


def conditional_step(tp: TiltParams, eps: EpsilonLaw, symbol: int, rng) -> int:
    """One step of the conditional chain given the current symbol."""
    if symbol < 2 * tp.dimension:
        return int(symbol)
    p = conditional_step_probs(tp, eps, symbol)
    return int(np.searchsorted(np.cumsum(p), rng.random(), side="right").clip(max=2 * tp.dimension - 1))


def _kbar_of(eps) -> float:
    """The per-symbol success probability; accepts an EpsilonLaw or a bare float.

    The waiting-time machinery only depends on this probability, so it also
    serves rates that no symbol alphabet of any dimension can carry.
    """
    k = eps.kbar if isinstance(eps, EpsilonLaw) else float(eps)
    if not (0.0 < k < 1.0):
        raise ValueError(f"success probability {k} must lie in (0, 1)")
    return k


def expected_tau(eps, cfg: StoppingConfig) -> float:
    """Expected symbols until the first run of L forced-ell symbols completes.

    Closed form (kbar^-L - 1) / (1 - kbar) for a run of L successes of
    probability kbar each.
    """
    k = _kbar_of(eps)
    return (k**-cfg.L - 1.0) / (1.0 - k)


def tau_survival(eps, cfg: StoppingConfig, horizon: int) -> np.ndarray:
    """P(tau_1 > t) for t = 0..horizon, exact via the run-length chain."""
    k = _kbar_of(eps)
    L = cfg.L
    v = np.zeros(L)
    v[0] = 1.0
    out = np.empty(horizon + 1)
    out[0] = 1.0
    for t in range(1, horizon + 1):
        nv = np.zeros(L)
        nv[0] = v.sum() * (1.0 - k)
        nv[1:] = v[:-1] * k
        v = nv
        out[t] = v.sum()
    return out


def choose_horizon(eps: EpsilonLaw, cfg: StoppingConfig, tail: float = 1e-4,
                   cap: int = TAU_HORIZON) -> int:
    """Smallest H with P(tau_1 > H) < tail, by doubling scans of the exact tail."""
    h = max(cfg.L, 16)
    while h <= cap:
        surv = tau_survival(eps, cfg, h)
        below = np.nonzero(surv < tail)[0]
        if below.size:
            return int(below[0])
        h *= 2
    raise BudgetError(f"tau tail stays above {tail} within the {cap}-symbol cap")


def sample_symbols_to_tau(eps: EpsilonLaw, cfg: StoppingConfig, rng,
                          horizon: int = TAU_HORIZON) -> np.ndarray:
    """Symbol draws up to and including the completion of the first L-run."""
    probs = eps.symbol_probs()
    cum = np.cumsum(probs)
    n_sym = len(probs)
    out = []
    run = 0
    for _ in range(horizon):
        s = int(np.searchsorted(cum, rng.random(), side="right").clip(max=n_sym - 1))
        out.append(s)
        run = run + 1 if s == cfg.ell else 0
        if run >= cfg.L:
            return np.asarray(out, dtype=np.int64)
    raise BudgetError(f"no run of {cfg.L} forced symbols within {horizon} draws; "
                      "kbar^L is too small for this budget")


def sample_tau(eps: EpsilonLaw, cfg: StoppingConfig, rng, horizon: int = TAU_HORIZON) -> int:
    """First time the trailing L symbols are all the forced direction."""
    return int(len(sample_symbols_to_tau(eps, cfg, rng, horizon)))


def sample_tau_batch(eps, cfg: StoppingConfig, n: int, rng,
                     horizon: int = TAU_HORIZON) -> np.ndarray:
    """n independent run-completion times, vectorized over a synchronous stream."""
    k = _kbar_of(eps)
    L = cfg.L
    tau = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    run = np.zeros(n, dtype=np.int32)
    t = 0
    while active.size:
        t += 1
        if t > horizon:
            raise BudgetError(f"{active.size} streams unfinished within {horizon} symbols")
        hit = rng.random(active.size) < k
        r = np.where(hit, run[active] + 1, 0)
        done = r >= L
        tau[active[done]] = t
        run[active] = r
        if done.any():
            active = active[~done]
    return tau


def psi_factor(tp: TiltParams, eps: EpsilonLaw, env: Environment, symbol: int,
               position, step: int) -> float:
    """Per-step reweighting restoring the environment inside the decomposition.

    For a forced symbol it is the indicator that the step matches the symbol.
    For the free symbol it is xi + kbar/(u(step) - kbar) * (xi - 1) with
    xi = omega(position, step) / E[omega(0, step)].
    """
    d = tp.dimension
    if symbol < 2 * d:
        return 1.0 if symbol == step else 0.0
    denom = tp.u_array[step] - eps.kbar
    if denom <= 0.0:
        raise ValueError(f"u(step) - kbar = {denom} must be positive")
    xi = float(env.omega(position)[step] / tp.means_array[step])
    return xi + eps.kbar / denom * (xi - 1.0)


def verify_psi_identity(tp: TiltParams, eps: EpsilonLaw, env: Environment, theta,
                        n: int, budget: int = 10**7) -> tuple:
    """Both sides of the reweighting identity by exact joint enumeration.

    lhs sums over all (symbol sequence, path) pairs the product of symbol
    probabilities, conditional step probabilities, psi factors and the tilt
    exp(<theta, Z_n>); rhs is the plain auxiliary-walk expectation of
    exp(<theta, Z_n>) times the realized xi-product.
    """
    d = tp.dimension
    n_sym = 2 * d + 1
    if (n_sym**n) * ((2 * d) ** n) > budget:
        raise BudgetError(f"(2d+1)^n * (2d)^n exceeds budget {budget}")
    theta = np.asarray(theta, dtype=np.float64)
    u = tp.u_array
    means = tp.means_array
    sym_probs = eps.symbol_probs()
    sym_matrix = _symbol_matrix(n_sym, n)

    lhs_terms = []
    rhs_terms = []
    for path in enumerate_paths(n, d):
        pos = path.positions
        end = np.asarray(path.endpoint, dtype=np.float64)
        tiltw = math.exp(float(theta @ end))
        xi = [float(env.omega(pos[j])[k] / means[k]) for j, k in enumerate(path.steps)]
        # rhs: plain auxiliary-walk weight times realized xi-product
        rhs_terms.append(float(np.prod(u[list(path.steps)])) * tiltw * float(np.prod(xi)))
        # lhs: sum over all symbol sequences of U * conditional chain * psi
        per_step = np.zeros((n, n_sym))
        for j, k in enumerate(path.steps):
            for s in range(n_sym):
                cond = conditional_step_probs(tp, eps, s)[k]
                if cond == 0.0:
                    continue
                if s < 2 * d:
                    psi = 1.0 if s == k else 0.0
                else:
                    psi = xi[j] + eps.kbar / (u[k] - eps.kbar) * (xi[j] - 1.0)
                per_step[j, s] = sym_probs[s] * cond * psi
        seq_weights = np.prod(per_step[np.arange(n)[None, :], sym_matrix], axis=1)
        lhs_terms.append(fsum(seq_weights) * tiltw)
    return fsum(lhs_terms), fsum(rhs_terms)


def qz_endpoint_distribution(tp: TiltParams, n: int) -> dict:
    """Endpoint law of the auxiliary walk by path enumeration."""
    out: dict = {}
    u = tp.u_array
    for path in enumerate_paths(n, tp.dimension):
        out[path.endpoint] = out.get(path.endpoint, 0.0) + float(np.prod(u[list(path.steps)]))
    return out


def _symbol_matrix(n_sym: int, n: int) -> np.ndarray:
    grids = np.meshgrid(*([np.arange(n_sym)] * n), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def decomposed_endpoint_distribution(tp: TiltParams, eps: EpsilonLaw, n: int,
                                     budget: int = 10**7) -> dict:
    """Endpoint law of the decomposed mechanism by joint enumeration.

    Must coincide with ``qz_endpoint_distribution``; the marginal per step is
    kbar + free_prob * (u(e) - kbar)/free_prob = u(e), but this function does
    not use that simplification.
    """
    d = tp.dimension
    n_sym = 2 * d + 1
    if (n_sym**n) * ((2 * d) ** n) > budget:
        raise BudgetError(f"joint enumeration exceeds budget {budget}")
    sym_probs = eps.symbol_probs()
    cond = np.stack([conditional_step_probs(tp, eps, s) for s in range(n_sym)])
    sym_matrix = _symbol_matrix(n_sym, n)
    out: dict = {}
    for path in enumerate_paths(n, d):
        steps = np.asarray(path.steps)
        per_step = sym_probs[:, None] * cond[:, steps]  # (n_sym, n)
        seq_weights = np.prod(per_step[sym_matrix, np.arange(n)[None, :]], axis=1)
        out[path.endpoint] = out.get(path.endpoint, 0.0) + fsum(seq_weights)
    return out


@dataclass
class BlockSample:
    """One stopped block of the decomposed walk.

    ``psi_product`` is the realized product of psi factors up to tau_1 in
    quenched mode, and its exact environment expectation in annealed mode;
    ``on_ray`` records whether every step up to tau_1 went in the forced
    direction.
    """

    epsilon: np.ndarray
    steps: np.ndarray
    tau1: int
    psi_product: float
    on_ray: bool

    def csv_row(self):
        return [self.tau1, int(self.on_ray), repr(math.log(self.psi_product)) if self.psi_product > 0 else "-inf"]


def sample_ray_block(tp: TiltParams, eps: EpsilonLaw, cfg: StoppingConfig,
                     env_or_law, mode: str, rng, horizon: int = TAU_HORIZON) -> BlockSample:
    """Sample symbols and conditional steps up to tau_1 and weigh the block.

    mode "quenched" reads xi from a fixed environment (which must cover the
    visited sites); mode "annealed" closes the environment expectation of the
    psi-product exactly by grouping visits per site (product laws only).
    """
    validate_stopping(tp, cfg)
    eps.validate_against(tp)
    symbols = sample_symbols_to_tau(eps, cfg, rng, horizon)
    d = tp.dimension
    steps = np.empty(len(symbols), dtype=np.int64)
    for j, s in enumerate(symbols):
        steps[j] = s if s < 2 * d else conditional_step(tp, eps, s, rng)
    on_ray = bool(np.all(steps == cfg.ell))
    path = Path(tuple(int(k) for k in steps), d)
    if mode == "quenched":
        env = env_or_law
        pos = path.positions
        w = 1.0
        for j, k in enumerate(steps):
            w *= psi_factor(tp, eps, env, int(symbols[j]), pos[j], int(k))
        psi_prod = w
    elif mode == "annealed":
        psi_prod = annealed_psi_product(tp, eps, env_or_law, symbols, path)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return BlockSample(symbols, steps, int(len(symbols)), float(psi_prod), on_ray)


def annealed_psi_product(tp: TiltParams, eps: EpsilonLaw, law: IIDProductLaw,
                         symbols: np.ndarray, path: Path) -> float:
    """E over environments of the psi-product along one (symbols, path) block.

    psi at a free-symbol step is affine in xi at the visited site, so per site
    the expectation closes as a finite mixture over atoms; distinct sites are
    independent. Forced-symbol steps contribute the bare indicator.
    """
    d = tp.dimension
    u = tp.u_array
    xi_atoms = law.xi_values()  # (K, 2d)
    groups: dict = {}
    pos = path.positions
    indicator = 1.0
    for j, k in enumerate(path.steps):
        s = int(symbols[j])
        if s < 2 * d:
            if s != k:
                indicator = 0.0
                break
            continue
        key = tuple(int(v) for v in pos[j])
        groups.setdefault(key, []).append(int(k))
    if indicator == 0.0:
        return 0.0
    total = 1.0
    for key, ks in groups.items():
        per_atom = np.ones(len(law.weights))
        for k in ks:
            c = eps.kbar / (u[k] - eps.kbar)
            per_atom *= xi_atoms[:, k] + c * (xi_atoms[:, k] - 1.0)
        total *= float(law.weights @ per_atom)
    return total


def write_blocks_csv(blocks, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau1", "on_ray", "log_psi_product"])
        for b in blocks:
            w.writerow(b.csv_row())
