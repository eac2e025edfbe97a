"""Potts-coupled hidden Markov random field over a grid of cells.

The per-cell hidden chains of `hmm` gain a within-year Potts term: the
unnormalized joint weight of a state field s (cells x years) is

    prod_cells [ pi[s_0] * prod_y A[s_{y-1}, s_y] * prod_y Pois-emissions ]
    * prod_years exp(beta * #{same-state neighbor pairs in that year})

with beta >= 0 encouraging spatially coherent control zones. beta = 0
recovers independent per-cell chains exactly.

Inference is blocked Gibbs sampling in chromatic order (within a year,
cells of one graph color are conditionally independent and update
together), which makes results reproducible and independent of thread
count. MAP-style decoding uses ICM with the same schedule; parameters
are fit by Monte Carlo EM at a fixed beta, and beta itself is chosen by
maximum pseudo-likelihood on a decoded or simulated field.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import rng
from .grid import NeighborGraph
from .hmm import (
    RATE_FLOOR,
    HmmParams,
    ImpossibleObservationError,
    ObservationSequence,
    baum_welch_fit,
    canonical_permutation,
    canonicalize,
    emission_loglik_matrix,
)
from .ingest import CountPanel


@dataclass(frozen=True)
class PottsParams:
    """Emission/transition parameters plus the spatial coupling strength."""

    hmm: HmmParams
    beta: float
    cell_trans: np.ndarray | None = None  # (n_cells, K, K) overrides hmm.trans

    def validate(self, n_cells: int | None = None) -> None:
        self.hmm.validate()
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if self.cell_trans is not None:
            k = self.hmm.n_states
            ct = np.asarray(self.cell_trans)
            if ct.ndim != 3 or ct.shape[1:] != (k, k):
                raise ValueError(f"cell_trans must be (n_cells, {k}, {k})")
            if n_cells is not None and ct.shape[0] != n_cells:
                raise ValueError("cell_trans has wrong number of cells")
            if (ct < 0).any() or np.abs(ct.sum(axis=2) - 1.0).max() > 1e-9:
                raise ValueError("cell_trans rows must be distributions")


@dataclass(frozen=True)
class FieldPosterior:
    """Posterior state marginals estimated from retained Gibbs samples."""

    marginal: np.ndarray  # (n_cells, n_years, K), sums to 1 over K
    n_samples: int
    sweeps: int
    burn_in: int
    thin: int


# ---- shared site machinery ----


def _padded_neighbors(graph: NeighborGraph) -> tuple[np.ndarray, np.ndarray]:
    """Adjacency as a (n_cells, max_degree) index array plus validity mask."""
    n = graph.n_cells
    max_deg = max((graph.degree(i) for i in range(n)), default=0)
    nbr = np.zeros((n, max_deg), dtype=np.int64)
    mask = np.zeros((n, max_deg), dtype=bool)
    for i in range(n):
        deg = graph.degree(i)
        nbr[i, :deg] = graph.neighbors(i)
        mask[i, :deg] = True
    return nbr, mask


def _neighbor_state_counts(
    states: np.ndarray, nbr: np.ndarray, mask: np.ndarray, k: int
) -> np.ndarray:
    """counts[i, s] = number of masked-in neighbors nbr[i] in state s."""
    padded = states[nbr]  # padding reads cell 0 but the mask removes it
    counts = np.empty((nbr.shape[0], k), dtype=np.int64)
    for s in range(k):
        counts[:, s] = ((padded == s) & mask).sum(axis=1)
    return counts


class _SiteModel:
    """Precomputed per-site log terms for Gibbs/ICM over one panel."""

    def __init__(self, params: PottsParams, panel: CountPanel, graph: NeighborGraph):
        params.validate(n_cells=panel.n_cells)
        panel.validate()
        if graph.n_cells != panel.n_cells:
            raise ValueError("graph and panel disagree on cell count")
        self.params = params
        self.k = params.hmm.n_states
        self.n_cells = panel.n_cells
        self.n_years = panel.n_years
        self.E = emission_loglik_matrix(params.hmm, panel.t, panel.c)  # (n, Y, K)
        best = self.E.max(axis=2)
        if np.isneginf(best).any():
            cell, year = np.argwhere(np.isneginf(best))[0]
            raise ImpossibleObservationError(int(year), f"cell {cell}")
        with np.errstate(divide="ignore"):
            self.log_pi = np.log(params.hmm.pi)
            if params.cell_trans is not None:
                self.log_a = np.log(np.asarray(params.cell_trans, dtype=float))
            else:
                self.log_a = np.broadcast_to(
                    np.log(params.hmm.trans), (self.n_cells, self.k, self.k)
                )
        self.nbr, self.mask = _padded_neighbors(graph)
        self.colors = [np.asarray(c, dtype=np.int64) for c in graph.greedy_coloring()]
        edges = graph.edges()
        self.edge_i = np.array([e[0] for e in edges], dtype=np.int64)
        self.edge_j = np.array([e[1] for e in edges], dtype=np.int64)

    def site_logits(self, field: np.ndarray, cells: np.ndarray, year: int) -> np.ndarray:
        """Unnormalized log full-conditionals, shape (len(cells), K)."""
        logits = self.E[cells, year].copy()
        if year == 0:
            logits += self.log_pi
        else:
            logits += self.log_a[cells, field[cells, year - 1], :]
        if year < self.n_years - 1:
            logits += self.log_a[cells, :, field[cells, year + 1]]
        if self.params.beta != 0.0:
            counts = _neighbor_state_counts(
                field[:, year], self.nbr[cells], self.mask[cells], self.k
            )
            logits += self.params.beta * counts
        return logits

    def joint_log_score(self, field: np.ndarray) -> float:
        cells = np.arange(self.n_cells)
        score = float(self.log_pi[field[:, 0]].sum())
        for year in range(1, self.n_years):
            score += float(self.log_a[cells, field[:, year - 1], field[:, year]].sum())
        score += float(
            self.E[cells[:, None], np.arange(self.n_years)[None, :], field].sum()
        )
        if self.params.beta != 0.0 and self.edge_i.size:
            score += self.params.beta * float((field[self.edge_i] == field[self.edge_j]).sum())
        return score

    def initial_field(self) -> np.ndarray:
        return np.argmax(self.E, axis=2).astype(np.int64)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    if np.isneginf(m).any():
        raise ImpossibleObservationError(-1, "a site has no admissible state")
    p = np.exp(logits - m)
    return p / p.sum(axis=1, keepdims=True)


def full_conditional(
    params: PottsParams,
    panel: CountPanel,
    graph: NeighborGraph,
    field: np.ndarray,
    cell: int,
    year: int,
) -> np.ndarray:
    """P(s_{cell,year} = k | all other sites, counts), as a length-K vector.

    Scalar reference for the samplers' vectorized inner loop; kept public
    so the two can be checked against each other.
    """
    model = _SiteModel(params, panel, graph)
    cells = np.array([cell], dtype=np.int64)
    return _softmax_rows(model.site_logits(np.asarray(field), cells, year))[0]


def joint_log_score(
    params: PottsParams, panel: CountPanel, graph: NeighborGraph, field: np.ndarray
) -> float:
    """Unnormalized joint log-weight of a full state field.

    Chain terms plus emissions plus beta times the number of same-state
    spatial neighbor pairs summed over years. Comparable across fields at
    fixed parameters (the Potts normalizer is a constant).
    """
    model = _SiteModel(params, panel, graph)
    field = np.asarray(field, dtype=np.int64)
    if field.shape != (panel.n_cells, panel.n_years):
        raise ValueError("field has wrong shape")
    return model.joint_log_score(field)


# ---- samplers and decoders ----


class _GibbsStats:
    """Sufficient statistics accumulated over retained Gibbs samples."""

    def __init__(self, n_cells: int, n_years: int, k: int):
        self.marg = np.zeros((n_cells, n_years, k))
        self.pair = np.zeros((k, k))
        self.year0 = np.zeros(k)
        self.score_sum = 0.0
        self.n_samples = 0

    def add(self, model: _SiteModel, field: np.ndarray) -> None:
        n_cells, n_years = field.shape
        self.marg[np.arange(n_cells)[:, None], np.arange(n_years)[None, :], field] += 1.0
        np.add.at(self.year0, field[:, 0], 1.0)
        if n_years > 1:
            np.add.at(self.pair, (field[:, :-1].ravel(), field[:, 1:].ravel()), 1.0)
        self.score_sum += model.joint_log_score(field)
        self.n_samples += 1


def _gibbs_run(
    model: _SiteModel,
    sweeps: int,
    burn_in: int,
    thin: int,
    seed: int,
    seed_path: tuple,
    init: np.ndarray | None,
) -> tuple[_GibbsStats, np.ndarray]:
    field = model.initial_field() if init is None else np.array(init, dtype=np.int64)
    if field.shape != (model.n_cells, model.n_years):
        raise ValueError("init field has wrong shape")
    stats = _GibbsStats(model.n_cells, model.n_years, model.k)
    for sweep in range(1, sweeps + 1):
        u = rng.stream(seed, *seed_path, "gibbs", sweep).random(
            (model.n_cells, model.n_years)
        )
        for year in range(model.n_years):
            for cells in model.colors:
                p = _softmax_rows(model.site_logits(field, cells, year))
                cum = np.cumsum(p, axis=1)
                draw = (cum < u[cells, year][:, None]).sum(axis=1)
                field[cells, year] = np.minimum(draw, model.k - 1)
        if sweep > burn_in and (sweep - burn_in) % thin == 0:
            stats.add(model, field)
    return stats, field


def gibbs_sample(
    params: PottsParams,
    panel: CountPanel,
    graph: NeighborGraph,
    sweeps: int = 200,
    burn_in: int = 50,
    thin: int = 2,
    seed: int = 0,
    init: np.ndarray | None = None,
    seed_path: tuple = (),
) -> tuple[FieldPosterior, np.ndarray]:
    """Systematic-scan Gibbs over the coupled field.

    One sweep visits every (cell, year) site once: years in order, and
    within a year the graph's color classes in order, each class updated
    as a block. Each sweep draws its uniforms as one (n_cells, n_years)
    array from a stream keyed by (seed, *seed_path, sweep), so output is
    invariant to scan partitioning and thread count.

    A sample is retained after sweep s (1-based) when s > burn_in and
    (s - burn_in) % thin == 0; the default 200/50/2 retains 75. Returns
    the retained-sample marginals and the final field. The default
    initial field is the per-site emission argmax.
    """
    _check_schedule(sweeps, burn_in, thin)
    model = _SiteModel(params, panel, graph)
    stats, field = _gibbs_run(model, sweeps, burn_in, thin, seed, seed_path, init)
    posterior = FieldPosterior(
        marginal=stats.marg / stats.n_samples,
        n_samples=stats.n_samples,
        sweeps=sweeps,
        burn_in=burn_in,
        thin=thin,
    )
    return posterior, field


def _check_schedule(sweeps: int, burn_in: int, thin: int) -> None:
    if sweeps < 1 or burn_in < 0 or thin < 1:
        raise ValueError("need sweeps >= 1, burn_in >= 0, thin >= 1")
    if (sweeps - burn_in) // thin < 1:
        raise ValueError(
            f"schedule retains no samples (sweeps={sweeps}, burn_in={burn_in}, thin={thin})"
        )


def icm_decode(
    params: PottsParams,
    panel: CountPanel,
    graph: NeighborGraph,
    init: np.ndarray | None = None,
    max_sweeps: int = 100,
) -> np.ndarray:
    """Iterated conditional modes: each site moves to its conditional argmax.

    Same chromatic schedule as the sampler, ties to the lower state index.
    Every update is a coordinate ascent step on joint_log_score, so the
    score is non-decreasing; stops at a fixed point or after max_sweeps.
    """
    model = _SiteModel(params, panel, graph)
    field = model.initial_field() if init is None else np.array(init, dtype=np.int64)
    if field.shape != (panel.n_cells, panel.n_years):
        raise ValueError("init field has wrong shape")
    for _ in range(max_sweeps):
        changed = False
        for year in range(model.n_years):
            for cells in model.colors:
                new = np.argmax(model.site_logits(field, cells, year), axis=1)
                if (new != field[cells, year]).any():
                    changed = True
                    field[cells, year] = new
        if not changed:
            break
    return field


# ---- fitting ----


def estimate_beta(
    field: np.ndarray,
    graph: NeighborGraph,
    candidates: np.ndarray | None = None,
) -> float:
    """Potts coupling estimate by maximum pseudo-likelihood on a state field.

    PL(beta) = sum over sites of [beta * n_same - logsumexp_k(beta * n_k)]
    where n_k counts the site's spatial neighbors in state k. Evaluated on
    a candidate grid (default 0 to 2 in steps of 0.05); the first
    maximizer wins ties.
    """
    field = np.asarray(field, dtype=np.int64)
    if field.ndim == 1:
        field = field[:, None]
    if candidates is None:
        candidates = np.linspace(0.0, 2.0, 41)
    candidates = np.asarray(candidates, dtype=float)
    if candidates.ndim != 1 or candidates.size == 0 or (candidates < 0).any():
        raise ValueError("candidates must be a nonempty 1-D array of beta >= 0")
    k = int(field.max()) + 1
    nbr, mask = _padded_neighbors(graph)
    counts = np.stack(
        [_neighbor_state_counts(field[:, y], nbr, mask, k) for y in range(field.shape[1])],
        axis=1,
    )  # (n_cells, n_years, K)
    own = np.take_along_axis(counts, field[..., None], axis=2)[..., 0]
    scores = np.empty(candidates.shape[0])
    for i, beta in enumerate(candidates):
        scores[i] = (beta * own - logsumexp(beta * counts, axis=2)).sum()
    return float(candidates[int(np.argmax(scores))])


def mcem_fit(
    panel: CountPanel,
    graph: NeighborGraph,
    k: int,
    beta: float,
    em_iters: int = 5,
    sweeps: int = 200,
    burn_in: int = 50,
    thin: int = 2,
    seed: int = 0,
    init_params: HmmParams | None = None,
    rate_floor: float = RATE_FLOOR,
    final_posterior: bool = True,
) -> tuple[PottsParams, FieldPosterior | None, list[float]]:
    """Monte Carlo EM for the coupled model at a fixed beta.

    Each E-step draws Gibbs samples of the field under current
    parameters; the M-step refits pi, trans, and rates from
    retained-sample state and temporal-pair frequencies in closed form.
    Initial parameters default to an independent-chains Baum-Welch fit (a
    warm start that is already the MLE when beta = 0). Consecutive
    E-steps chain their fields (each starts from the previous final
    state) with per-iteration seed paths.

    Returns (params, posterior, trace): the params are canonically
    relabeled, the posterior comes from a final Gibbs pass under the
    returned parameters (None when final_posterior is off and the caller
    will sample its own), and trace[i] is the mean joint log-score of the
    samples retained in E-step i (Monte Carlo noise means it need not
    increase monotonically).
    """
    panel.validate()
    _check_schedule(sweeps, burn_in, thin)
    if k < 1:
        raise ValueError("k must be >= 1")
    if em_iters < 0:
        raise ValueError("em_iters must be >= 0")
    if init_params is None:
        sequences = [
            ObservationSequence(panel.t[i], panel.c[i]) for i in range(panel.n_cells)
        ]
        init_params, _ = baum_welch_fit(sequences, k, seed=seed)
    else:
        init_params.validate()
        if init_params.n_states != k:
            raise ValueError("init_params has wrong number of states")
    hmm_params = init_params
    trace: list[float] = []
    field = None
    t = panel.t.astype(float)
    c = panel.c.astype(float)
    for it in range(em_iters):
        model = _SiteModel(PottsParams(hmm=hmm_params, beta=beta), panel, graph)
        stats, field = _gibbs_run(
            model, sweeps, burn_in, thin, seed, ("mcem", it), field
        )
        trace.append(stats.score_sum / stats.n_samples)

        pi = stats.year0 / stats.year0.sum()
        rowsum = stats.pair.sum(axis=1, keepdims=True)
        trans = np.where(
            rowsum > 0.0, stats.pair / np.where(rowsum > 0, rowsum, 1.0), 1.0 / k
        )
        resp = stats.marg.sum(axis=(0, 1))
        starved = resp < 1e-12
        if starved.any():
            warnings.warn(
                f"state(s) {np.where(starved)[0].tolist()} unvisited in E-step samples; "
                f"rate floor {rate_floor} applied",
                RuntimeWarning,
                stacklevel=2,
            )
        safe = np.where(starved, 1.0, resp)
        lam_t = np.where(
            starved, rate_floor, np.maximum(np.einsum("cyk,cy->k", stats.marg, t) / safe, rate_floor)
        )
        lam_c = np.where(
            starved, rate_floor, np.maximum(np.einsum("cyk,cy->k", stats.marg, c) / safe, rate_floor)
        )
        hmm_params = HmmParams(pi=pi, trans=trans, lambda_t=lam_t, lambda_c=lam_c)
    perm = canonical_permutation(hmm_params)
    hmm_params = canonicalize(hmm_params)
    if field is not None:
        inv = np.empty(k, dtype=np.int64)
        inv[perm] = np.arange(k)
        field = inv[field]
    final = PottsParams(hmm=hmm_params, beta=beta)
    posterior = None
    if final_posterior:
        posterior, _ = gibbs_sample(
            final, panel, graph, sweeps=sweeps, burn_in=burn_in, thin=thin,
            seed=seed, init=field, seed_path=("mcem", "final"),
        )
    return final, posterior, trace


# ---- posterior CSV round trip ----


def write_posterior_csv(marginal: np.ndarray, year_start: int, path: str | Path) -> None:
    """Rows (cell_id, year, state, probability), cell-major then year then state."""
    marginal = np.asarray(marginal, dtype=float)
    n_cells, n_years, k = marginal.shape
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("cell_id,year,state,probability\n")
        for cell in range(n_cells):
            for yi in range(n_years):
                for s in range(k):
                    fh.write(f"{cell},{year_start + yi},{s},{float(marginal[cell, yi, s])!r}\n")


def read_posterior_csv(path: str | Path) -> tuple[np.ndarray, int]:
    """Inverse of write_posterior_csv; insists on a dense (cells, years, K) block."""
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["cell_id", "year", "state", "probability"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: expected header {expected}, got {reader.fieldnames}")
        for row in reader:
            rows.append(
                (int(row["cell_id"]), int(row["year"]), int(row["state"]),
                 float(row["probability"]))
            )
    if not rows:
        raise ValueError(f"{path}: empty posterior")
    n_cells = max(r[0] for r in rows) + 1
    year_start = min(r[1] for r in rows)
    n_years = max(r[1] for r in rows) - year_start + 1
    k = max(r[2] for r in rows) + 1
    marginal = np.full((n_cells, n_years, k), np.nan)
    for cell, year, s, p in rows:
        if not np.isnan(marginal[cell, year - year_start, s]):
            raise ValueError(f"{path}: duplicate row for cell {cell}, year {year}, state {s}")
        marginal[cell, year - year_start, s] = p
    if np.isnan(marginal).any():
        raise ValueError(f"{path}: posterior is not dense")
    return marginal, year_start
