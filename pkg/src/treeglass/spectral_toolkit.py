"""Exact kernels, Dirichlet forms, spectral gaps and the gap bounds built from them."""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Literal, TypeAlias

import numpy as np
import scipy.linalg as sla
from scipy import sparse

from src.logging_config import logger

from .errors import ConvergenceError, SizeGuardError
from .gibbs_engine import GibbsTable, StateSpace
from .glauber_dynamics import BlockDynamics, check_kernel_size
from .settings import settings
from .tree_model import BoundaryCondition, IsingParams, SpinConfig, TreeShape

# Dense probability vector aligned with a kernel's state enumeration.
DistVector: TypeAlias = np.ndarray

GapMethod = Literal["auto", "dense", "power_iteration"]


def check_distribution(p: DistVector, tol: float = 1e-12) -> None:
    p = np.asarray(p)
    if np.any(p < -tol):
        raise ValueError("distribution has negative entries")
    if abs(p.sum() - 1.0) > tol * max(1, p.size):
        raise ValueError(f"distribution sums to {p.sum()!r}, not 1")


@dataclass
class MarkovKernel:
    matrix: sparse.csr_matrix
    pi: DistVector
    reversible: bool = True
    rate: int = 1
    space: StateSpace | None = None
    label: str = ""

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])

    def row_sum_residual(self) -> float:
        return float(np.max(np.abs(np.asarray(self.matrix.sum(axis=1)).ravel() - 1.0)))

    def stationarity_residual(self) -> float:
        return float(np.max(np.abs(self.matrix.T @ self.pi - self.pi)))

    def detailed_balance_residual(self) -> float:
        flow = sparse.diags(self.pi) @ self.matrix
        diff = (flow - flow.T).tocoo()
        return float(np.max(np.abs(diff.data))) if diff.nnz else 0.0

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def evolve(self, dist: DistVector, steps: int = 1) -> DistVector:
        out = np.asarray(dist, dtype=np.float64)
        for _ in range(steps):
            out = self.matrix.T @ out
        return out


def kernel_from_matrix(
    matrix: np.ndarray | sparse.spmatrix,
    pi: DistVector | None = None,
    rate: int = 1,
    tol: float = 1e-10,
) -> MarkovKernel:
    """Wrap a row-stochastic matrix; pi defaults to the stationary vector of the matrix."""
    csr = sparse.csr_matrix(matrix, dtype=np.float64)
    if pi is None:
        values, vectors = sla.eig(csr.toarray().T)
        idx = int(np.argmin(np.abs(values - 1.0)))
        pi = np.abs(np.real(vectors[:, idx]))
        pi = pi / pi.sum()
    kernel = MarkovKernel(csr, np.asarray(pi, dtype=np.float64), rate=rate)
    if kernel.row_sum_residual() > tol:
        raise ValueError("matrix is not row-stochastic")
    kernel.reversible = kernel.detailed_balance_residual() <= tol
    return kernel


def build_kernel(dynamics: BlockDynamics, table: GibbsTable | None = None) -> MarkovKernel:
    """Exact kernel of a block dynamics: the uniform mixture of its target resampling
    matrices, reversible with respect to the Gibbs measure."""
    check_kernel_size(dynamics)
    table = table or dynamics.gibbs()
    mats = dynamics.target_matrices(table)
    if not mats:
        raise ValueError(f"dynamics {dynamics.label!r} has no free update targets")
    matrix = sparse.csr_matrix(sum(mats[1:], mats[0]) / len(mats))
    if matrix.nnz > settings.max_kernel_nonzeros:
        raise SizeGuardError("kernel nonzeros", matrix.nnz, settings.max_kernel_nonzeros)
    logger.debug(
        "build_kernel(%s): %d states, %d targets, %d nonzeros",
        dynamics.label,
        table.space.size,
        len(mats),
        matrix.nnz,
    )
    return MarkovKernel(
        matrix, table.probs, reversible=True, rate=dynamics.rate, space=table.space,
        label=dynamics.label,
    )


def single_site_kernel(
    shape: TreeShape, params: IsingParams, boundary: BoundaryCondition | None = None
) -> MarkovKernel:
    return build_kernel(BlockDynamics.single_site(shape, params, boundary))


def _require_reversible(kernel: MarkovKernel) -> None:
    if not kernel.reversible:
        raise ValueError("operation needs a reversible kernel")


def dirichlet_form(f: np.ndarray, kernel: MarkovKernel, method: str = "operator") -> float:
    """E(f) = <(I - P) f, f>_pi, or 1/2 sum (f(x) - f(y))^2 pi(x) P(x, y) with
    ``method="pairwise"``."""
    _require_reversible(kernel)
    f = np.asarray(f, dtype=np.float64)
    if method == "operator":
        return float(np.dot(kernel.pi * f, f - kernel.matrix @ f))
    if method == "pairwise":
        coo = kernel.matrix.tocoo()
        diff = f[coo.row] - f[coo.col]
        return float(0.5 * np.sum(diff * diff * kernel.pi[coo.row] * coo.data))
    raise ValueError(f"unknown method {method!r}")


def variance_entropy(f: np.ndarray, pi: DistVector) -> tuple[float, float]:
    """(Var_pi f, Ent_pi f) with Ent_pi f = E[f^2 log(f^2 / E f^2)] and 0 log 0 = 0."""
    f = np.asarray(f, dtype=np.float64)
    mean = float(np.dot(pi, f))
    var = max(float(np.dot(pi, (f - mean) ** 2)), 0.0)
    f2 = f * f
    m2 = float(np.dot(pi, f2))
    if m2 == 0.0:
        return var, 0.0
    mask = f2 > 0.0
    ent = float(np.dot(pi[mask], f2[mask] * np.log(f2[mask] / m2)))
    return var, max(ent, 0.0)


def log_sobolev_quotient(f: np.ndarray, kernel: MarkovKernel) -> float:
    """E(f) / Ent(f) for one test function; an upper bound on the log-Sobolev constant."""
    _, ent = variance_entropy(f, kernel.pi)
    if ent == 0.0:
        raise ValueError("test function has zero entropy")
    return dirichlet_form(f, kernel) / ent


def _symmetrized(kernel: MarkovKernel) -> sparse.csr_matrix:
    root = np.sqrt(kernel.pi)
    s = sparse.diags(root) @ kernel.matrix @ sparse.diags(1.0 / root)
    return sparse.csr_matrix(0.5 * (s + s.T))


def spectrum(kernel: MarkovKernel) -> tuple[np.ndarray, np.ndarray]:
    """All eigenvalues (descending) and the matching right eigenvectors of a reversible
    kernel, from the dense solve of D^(1/2) P D^(-1/2)."""
    _require_reversible(kernel)
    if kernel.size > settings.dense_max_states:
        raise SizeGuardError("dense eigensolve", kernel.size, settings.dense_max_states)
    values, vectors = sla.eigh(_symmetrized(kernel).toarray())
    order = np.argsort(values)[::-1]
    return values[order], vectors[:, order] / np.sqrt(kernel.pi)[:, None]


def _power_gap(kernel: MarkovKernel) -> float:
    """Block subspace iteration on (S + I)/2 deflated against sqrt(pi); returns 1 - lambda_2."""
    a = 0.5 * (_symmetrized(kernel) + sparse.identity(kernel.size, format="csr"))
    top = np.sqrt(kernel.pi)
    top /= np.linalg.norm(top)
    k = max(1, min(settings.power_block_size, kernel.size - 1))
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((kernel.size, k)))
    residual = math.inf
    mu = 0.0
    check_freq = 10
    warned = False
    for it in range(1, settings.power_max_iter + 1):
        z = a @ q
        z -= np.outer(top, top @ z)
        q, _ = np.linalg.qr(z)
        if it % check_freq:
            continue
        aq = a @ q
        aq -= np.outer(top, top @ aq)
        ritz_values, ritz_vectors = sla.eigh(q.T @ aq)
        mu = float(ritz_values[-1])
        v = q @ ritz_vectors[:, -1]
        residual = float(np.linalg.norm(aq @ ritz_vectors[:, -1] - mu * v))
        if residual < settings.power_tol:
            logger.debug("power iteration converged after %d iterations", it)
            return 2.0 * (1.0 - mu)
        if not warned and it > 0.9 * settings.power_max_iter:
            logger.warning(
                "power iteration near its cap: %d of %d iterations, residual %.3e",
                it,
                settings.power_max_iter,
                residual,
            )
            warned = True
    raise ConvergenceError("power iteration hit its iteration cap", residual)


def spectral_gap(kernel: MarkovKernel, method: GapMethod = "auto") -> float:
    """1 - lambda_2, lambda_2 the largest eigenvalue below the trivial one."""
    _require_reversible(kernel)
    if kernel.size == 1:
        logger.warning("spectral gap of a 1-state chain taken as 1")
        return 1.0
    if method == "auto":
        method = "dense" if kernel.size <= settings.dense_max_states else "power_iteration"
    if method == "dense":
        values, _ = spectrum(kernel)
        return float(1.0 - values[1])
    if method == "power_iteration":
        return _power_gap(kernel)
    raise ValueError(f"unknown method {method!r}")


def continuous_gap(kernel: MarkovKernel, method: GapMethod = "auto") -> float:
    return kernel.rate * spectral_gap(kernel, method)


def gap_from_spectrum(values: Sequence[float]) -> float:
    ordered = np.sort(np.asarray(values, dtype=np.float64))[::-1]
    if ordered.size == 1:
        return 1.0
    return float(1.0 - ordered[1])


def rayleigh_gap_bound(f: np.ndarray, kernel: MarkovKernel) -> float:
    """E(f) / Var(f), an upper bound on the gap."""
    var, _ = variance_entropy(f, kernel.pi)
    if var <= 1e-300:
        raise ValueError("test function is constant under pi")
    return dirichlet_form(f, kernel) / var




# Magnetisation weighted by theta^depth.


def weighted_sum_values(space: StateSpace, params: IsingParams) -> np.ndarray:
    """g(sigma) = sum_v theta^level(v) sigma(v) for every state."""
    out = np.zeros(space.size)
    for v in space.vertices:
        out += params.theta ** space.shape.level(v) * space.spin_column(v)
    return out


def weighted_sum_variance_exact(b: int, h: int, theta: float) -> float:
    """Free-boundary Var(g): sum_k q^k (1 + 2 S + (b-1)/b S^2), q = b theta^2,
    S = q + ... + q^(h-k)."""
    q = b * theta * theta
    total = []
    for k in range(h + 1):
        s = math.fsum(q**i for i in range(1, h - k + 1))
        total.append(q**k * (1.0 + 2.0 * s + (b - 1) / b * s * s))
    return math.fsum(total)


def weighted_sum_variance_closed_form(b: int, h: int, epsilon: float | None = None) -> float:
    """The closed-form lower bounds on Var(g): (b-1)/(6b) h(h+1)(2h+1) at criticality and
    (b-1)/(b eps^3)((1+eps)^(2h+3) - (2h+3) eps (1+eps)^(h+1) - 1) near it.

    Both sit below :func:`weighted_sum_variance_exact`. The critical one drops the
    (h+1)^2 contribution of the diagonal and nearest terms, and the near-critical one tends to
    (b-1)/(6b)(h+1)(h+2)(2h+3) as eps -> 0 rather than to the critical one.
    """
    if epsilon is None or epsilon == 0.0:
        return (b - 1) / (6.0 * b) * h * (h + 1) * (2 * h + 1)
    if epsilon < 0.0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon!r}")
    e = epsilon
    bracket = (1 + e) ** (2 * h + 3) - (2 * h + 3) * e * (1 + e) ** (h + 1) - 1.0
    return (b - 1) / (b * e**3) * bracket


def weighted_sum_dirichlet_bound(b: int, h: int, epsilon: float | None = None) -> float:
    """Upper bound on E(g) for the single-site chain: 2h/n, or (2/n)((1+eps)^(h+1) - 1)/eps."""
    n = TreeShape(b, h).n
    if epsilon is None or epsilon == 0.0:
        return 2.0 * h / n
    return 2.0 / n * ((1.0 + epsilon) ** (h + 1) - 1.0) / epsilon


def critical_gap_upper_bound(b: int, h: int) -> float:
    """(6b/(b-1)) / (n h^2)."""
    if h < 1:
        raise ValueError(f"height must be >= 1, got {h!r}")
    return 6.0 * b / (b - 1) / (TreeShape(b, h).n * h * h)


def variational_gap_bound(b: int, h: int, epsilon: float | None = None) -> float:
    """E(g) upper bound over the Var(g) closed form."""
    return weighted_sum_dirichlet_bound(b, h, epsilon) / weighted_sum_variance_closed_form(
        b, h, epsilon
    )


def near_critical_gap_upper_bound(b: int, h: int, epsilon: float) -> tuple[float, str]:
    """(4b/(b-1)) eps^2/(n (1+eps)^h) when eps >= 8/h, else (3 e^7 b/(b-1))/(n h^2)."""
    n = TreeShape(b, h).n
    if epsilon >= 8.0 / h:
        return 4.0 * b / (b - 1) * epsilon**2 / (n * (1.0 + epsilon) ** h), "large"
    return 3.0 * math.exp(7.0) * b / (b - 1) / (n * h * h), "small"


def near_critical_gap_lower_bound_formula(h: int, epsilon: float, c1: float = 1.0) -> float:
    """c1 min(1/eps, h)^2 (1+eps)^h for the continuous-time inverse gap."""
    scale = h if epsilon == 0.0 else min(1.0 / epsilon, h)
    return c1 * scale * scale * (1.0 + epsilon) ** h


def near_critical_capacity_bound(epsilon: float, depth: int) -> float:
    """eps / (1 - (1+eps)^(-depth)); tends to 1/depth as eps -> 0."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth!r}")
    if epsilon == 0.0:
        return 1.0 / depth
    return epsilon / (1.0 - (1.0 + epsilon) ** (-depth))


def near_critical_block_levels(h: int, epsilon: float, alpha: float) -> tuple[int, int]:
    """ell = floor(alpha min(1/eps, h)), r = h - ell."""
    scale = h if epsilon == 0.0 else min(1.0 / epsilon, h)
    ell = math.floor(alpha * scale + 1e-9)
    return ell, h - ell


def block_dynamics_gap_formula(
    b: int, ell: int, alpha: float, theta: float, kappa: float | None = None
) -> float:
    """(1/(4(b^ell+1))) (1 - alpha/(kappa (1-theta)(1-2 alpha)))."""
    kappa = settings.kappa if kappa is None else kappa
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 1/2), got {alpha!r}")
    return (1.0 - alpha / (kappa * (1.0 - theta) * (1.0 - 2.0 * alpha))) / (4.0 * (b**ell + 1))


def contraction_iota(b: int, ell: int, r: int, theta: float, kappa: float | None = None) -> float:
    """b^ell/(b^ell+1) + (1/(b^ell+1)) (1 + (b-1) ell)/(b kappa (1-theta)(r-ell))."""
    kappa = settings.kappa if kappa is None else kappa
    if r <= ell:
        raise ValueError(f"need r > ell, got ell={ell!r}, r={r!r}")
    m = b**ell
    return m / (m + 1) + (1 + (b - 1) * ell) / (b * kappa * (1 - theta) * (r - ell)) / (m + 1)


def restriction_gap_formula(b: int, ell: int) -> float:
    return 1.0 / (b**ell + 1)


# Product chains.


def product_chain_eigenvalues(
    spectra: Sequence[Sequence[float]], weights: Sequence[float]
) -> np.ndarray:
    """Multiset {sum_j nu_j lambda_j : lambda_j in spectrum j}, sorted descending."""
    if len(spectra) != len(weights):
        raise ValueError("one weight per component spectrum is required")
    acc = np.zeros(1)
    for values, nu in zip(spectra, weights):
        acc = np.add.outer(acc, nu * np.asarray(values, dtype=np.float64)).ravel()
    return np.sort(acc)[::-1]


def product_kernel_matrix(
    components: Sequence[np.ndarray], weights: Sequence[float]
) -> np.ndarray:
    """sum_j nu_j I x ... x P_j x ... x I."""
    sizes = [c.shape[0] for c in components]
    total = int(np.prod(sizes))
    out = np.zeros((total, total))
    for j, (p, nu) in enumerate(zip(components, weights)):
        term = np.ones((1, 1))
        for i, size in enumerate(sizes):
            term = np.kron(term, p if i == j else np.eye(size))
        out += nu * term
    return out


def restriction_product_gap(b: int, ell: int) -> float:
    """Gap of b^ell fresh-resampling components plus a holding component, each picked with
    probability 1/(b^ell + 1)."""
    m = b**ell
    spectra = [[1.0]] + [[1.0, 0.0]] * m
    weights = [1.0 / (m + 1)] * (m + 1)
    return gap_from_spectrum(product_chain_eigenvalues(spectra, weights))


# Projection / restriction decomposition.


@dataclass
class Decomposition:
    projection: MarkovKernel
    restrictions: list[MarkovKernel]
    gamma: float
    gap_projection: float
    gap_min: float
    bound: float


def decompose_chain(kernel: MarkovKernel, labels: np.ndarray) -> Decomposition:
    """Split ``kernel`` along the partition ``labels`` (cell id per state) into the projection
    chain on cells and one restriction chain per cell, and return the resulting bound
    min(gap_bar/3, gap_bar gap_min/(3 gamma + gap_bar)) on the gap."""
    _require_reversible(kernel)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (kernel.size,):
        raise ValueError("one cell label per state is required")
    cells = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=cells)
    if np.any(counts == 0):
        raise ValueError(f"partition has empty cells: {np.flatnonzero(counts == 0).tolist()!r}")

    pi = kernel.pi
    pi_bar = np.bincount(labels, weights=pi, minlength=cells)
    member = sparse.csr_matrix(
        (np.ones(kernel.size), (np.arange(kernel.size), labels)), shape=(kernel.size, cells)
    )
    flow = member.T @ sparse.diags(pi) @ kernel.matrix @ member
    projection = MarkovKernel(
        sparse.csr_matrix(sparse.diags(1.0 / pi_bar) @ flow), pi_bar, label="projection"
    )

    restrictions = []
    gamma = 0.0
    gaps = []
    for i in range(cells):
        idx = np.flatnonzero(labels == i)
        block = kernel.matrix[idx][:, idx].tolil()
        stay = np.asarray(block.sum(axis=1)).ravel()
        gamma = max(gamma, float(np.max(1.0 - stay)))
        block.setdiag(block.diagonal() + (1.0 - stay))
        restriction = MarkovKernel(
            sparse.csr_matrix(block), pi[idx] / pi_bar[i], label=f"restriction[{i}]"
        )
        restrictions.append(restriction)
        gaps.append(spectral_gap(restriction))

    gap_bar = spectral_gap(projection)
    gap_min = min(gaps)
    bound = min(gap_bar / 3.0, gap_bar * gap_min / (3.0 * gamma + gap_bar))
    logger.debug(
        "decomposition: %d cells, gap_bar %.6g, gap_min %.6g, gamma %.6g, bound %.6g",
        cells, gap_bar, gap_min, gamma, bound,
    )
    return Decomposition(projection, restrictions, gamma, gap_bar, gap_min, bound)


def spin_partition(space: StateSpace, vertices: Sequence[int]) -> np.ndarray:
    """Cell label per state: the configuration on ``vertices``."""
    return space.code(vertices)


# Contraction.


@dataclass(frozen=True)
class ContractionEstimate:
    iota: float
    stderr: float
    gap_lower_bound: float
    pairs: int


def contraction_gap_bound(
    coupled_step: Callable[[object, object, np.random.Generator], tuple[object, object]],
    metric: Callable[[object, object], float],
    pairs: Sequence[tuple[object, object]],
    trials: int,
    rng: np.random.Generator,
) -> ContractionEstimate:
    """iota = max over pairs of E[dist after one coupled step] / dist; gap >= 1 - iota."""
    best, best_err, used = -math.inf, 0.0, 0
    for x, y in pairs:
        d0 = metric(x, y)
        if d0 == 0:
            continue
        used += 1
        after = np.array([metric(*coupled_step(x, y, rng)) for _ in range(trials)]) / d0
        mean = float(after.mean())
        if mean > best:
            best = mean
            best_err = float(after.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.inf
    if used == 0:
        raise ValueError("every pair is at distance zero")
    return ContractionEstimate(best, best_err, 1.0 - best, used)


def hamming(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.count_nonzero(np.asarray(x) != np.asarray(y)))


# Block dynamics against single-site dynamics.


def block_vs_single_site_bound(
    gap_block: float,
    block_gaps: Sequence[float],
    block_sizes: Sequence[int],
    multiplicity: int,
    n_sites: int,
) -> float:
    """(k/|W|) gap_blocks min_i(|B_i| gap_i) / max multiplicity, k the number of blocks."""
    if len(block_gaps) != len(block_sizes):
        raise ValueError("one size per block gap is required")
    values = [gap_block, *block_gaps, *block_sizes, multiplicity, n_sites]
    if any(v <= 0 for v in values):
        raise ValueError("all inputs must be positive")
    k = len(block_gaps)
    worst = min(size * gap for size, gap in zip(block_sizes, block_gaps))
    return k / n_sites * gap_block * worst / multiplicity


@dataclass(frozen=True)
class BlockGapMinimum:
    gap: float
    exact: bool
    boundaries: int


def block_boundary_gap_minimum(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition,
    block: Sequence[int],
    max_enumerate: int = 12,
    samples: int = 64,
    rng: np.random.Generator | None = None,
) -> BlockGapMinimum:
    """Minimum over outside spins phi of the single-site gap inside ``block``.

    phi runs over all configurations of the block's free outer neighbours when there are at
    most ``max_enumerate`` of them, else over ``samples`` random draws (an estimate).
    """
    frozen = boundary.frozen_spins(shape)
    inside = set(block)
    outer = sorted({y for v in block for y in shape.neighbor_lists[v] if y not in inside})
    free_outer = [y for y in outer if y not in frozen]
    support = frozenset(inside | set(outer))
    fixed = {v: s for v, s in frozen.items() if v in support}
    exact = len(free_outer) <= max_enumerate
    if exact:
        phis: list[tuple[int, ...]] = list(itertools.product((-1, 1), repeat=len(free_outer)))
    else:
        rng = rng or np.random.default_rng(0)
        logger.warning(
            "block with %d free outer neighbours: sampling %d boundaries, minimum is an estimate",
            len(free_outer),
            samples,
        )
        phis = [tuple(rng.choice((-1, 1), size=len(free_outer))) for _ in range(samples)]
    free_block = [v for v in block if v not in frozen]
    if not free_block:
        raise ValueError("block has no free vertices")
    best = math.inf
    for phi in phis:
        spins = dict(fixed)
        spins.update(zip(free_outer, (int(s) for s in phi)))
        cond = BoundaryCondition.frozen_set(spins)
        dynamics = BlockDynamics(
            shape,
            params,
            cond,
            tuple((v,) for v in free_block),
            support=support,
            label="block_single_site",
        )
        best = min(best, spectral_gap(build_kernel(dynamics)))
    return BlockGapMinimum(best, exact, len(phis))


def state_of(kernel: MarkovKernel, config: SpinConfig) -> int:
    if kernel.space is None:
        raise ValueError("kernel carries no state space")
    return kernel.space.index_of(config)
