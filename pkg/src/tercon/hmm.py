"""Discrete-state hidden Markov model with independent Poisson pair emissions.

Each hidden state is a level of territorial control; each year it emits a
pair of counts (terror attacks, conventional war acts) drawn from two
independent Poissons with state-specific rates. Inference is exact
(scaled forward-backward), fitting is maximum likelihood (Baum-Welch over
one or many sequences), decoding is Viterbi.

State labels follow a canonical order: decreasing terror share
lambda_t / (lambda_t + lambda_c), so state 0 is always the most
terrorism-dominant regime and state K-1 the most conventional-war one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import poisson

from . import rng

RATE_FLOOR = 1e-6
_SHARE_EPS = 1e-12


class ImpossibleObservationError(ValueError):
    """An observation has zero probability under every reachable state."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"observation at step {step} is impossible under the model"
        super().__init__(msg + (f" ({detail})" if detail else ""))


@dataclass(frozen=True)
class HmmParams:
    """Initial distribution, transition matrix, and per-state Poisson rates."""

    pi: np.ndarray        # (K,)
    trans: np.ndarray     # (K, K), rows sum to 1
    lambda_t: np.ndarray  # (K,) terror rate per year
    lambda_c: np.ndarray  # (K,) conventional rate per year

    def __post_init__(self):
        for name in ("pi", "trans", "lambda_t", "lambda_c"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def n_states(self) -> int:
        return self.pi.shape[0]

    def validate(self) -> None:
        k = self.n_states
        if k < 1:
            raise ValueError("need at least one state")
        if self.trans.shape != (k, k):
            raise ValueError(f"trans must be {k}x{k}")
        if self.lambda_t.shape != (k,) or self.lambda_c.shape != (k,):
            raise ValueError("rate vectors must have one entry per state")
        if (self.pi < 0).any() or (self.trans < 0).any():
            raise ValueError("probabilities must be nonnegative")
        if (self.lambda_t < 0).any() or (self.lambda_c < 0).any():
            raise ValueError("Poisson rates must be nonnegative")
        if abs(self.pi.sum() - 1.0) > 1e-9:
            raise ValueError(f"pi sums to {self.pi.sum()!r}, not 1")
        rowsums = self.trans.sum(axis=1)
        if np.abs(rowsums - 1.0).max() > 1e-9:
            raise ValueError(f"trans rows sum to {rowsums!r}, not 1")

    def terror_share(self) -> np.ndarray:
        return self.lambda_t / (self.lambda_t + self.lambda_c + _SHARE_EPS)


def canonical_permutation(params: HmmParams) -> np.ndarray:
    """perm such that new state n is old state perm[n], in canonical order.

    Sort key: terror share descending, then lambda_t and lambda_c
    descending as tie breaks, so any permutation of the same parameter set
    maps to one representative.
    """
    share = params.terror_share()
    return np.lexsort((-params.lambda_c, -params.lambda_t, -share))


def canonicalize(params: HmmParams) -> HmmParams:
    """Relabel states into the canonical terror-share order (a normal form)."""
    perm = canonical_permutation(params)
    return HmmParams(
        pi=params.pi[perm],
        trans=params.trans[np.ix_(perm, perm)],
        lambda_t=params.lambda_t[perm],
        lambda_c=params.lambda_c[perm],
    )


@dataclass(frozen=True)
class ObservationSequence:
    """Annual (terror, conventional) count pair sequence for one cell."""

    t_counts: np.ndarray
    c_counts: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_counts, dtype=np.int64)
        c = np.asarray(self.c_counts, dtype=np.int64)
        if t.ndim != 1 or t.shape != c.shape or t.size < 1:
            raise ValueError("t_counts and c_counts must be equal-length, nonempty 1-D")
        if (t < 0).any() or (c < 0).any():
            raise ValueError("counts must be nonnegative")
        object.__setattr__(self, "t_counts", t)
        object.__setattr__(self, "c_counts", c)

    def __len__(self) -> int:
        return self.t_counts.shape[0]


@dataclass(frozen=True)
class PosteriorMarginals:
    """Forward-backward outputs: smoothed state and transition posteriors."""

    gamma: np.ndarray  # (T, K), rows sum to 1
    xi: np.ndarray     # (T-1, K, K), each slice sums to 1
    loglik: float


def emission_loglik(params: HmmParams, t: int, c: int, k: int) -> float:
    """log P(t, c | state k) = log Pois(t; lambda_t[k]) + log Pois(c; lambda_c[k]).

    Zero-rate convention: Pois(0; 0) = 1 and Pois(n>0; 0) = 0, so the
    return value may be -inf.
    """
    if t < 0 or c < 0:
        raise ValueError("counts must be nonnegative")
    return float(
        poisson.logpmf(t, params.lambda_t[k]) + poisson.logpmf(c, params.lambda_c[k])
    )


def emission_loglik_matrix(
    params: HmmParams, t_counts: np.ndarray, c_counts: np.ndarray
) -> np.ndarray:
    """Log emission matrix with shape t_counts.shape + (K,)."""
    t = np.asarray(t_counts)[..., None]
    c = np.asarray(c_counts)[..., None]
    with np.errstate(divide="ignore"):
        return poisson.logpmf(t, params.lambda_t) + poisson.logpmf(c, params.lambda_c)


def forward_backward(params: HmmParams, obs: ObservationSequence) -> PosteriorMarginals:
    """Exact smoothed posteriors and log-likelihood via scaled forward-backward.

    Per-step scaling (plus an emission max-shift) keeps the recursion in
    the normal floating range for sequences up to ~1e4 steps.

    Raises ImpossibleObservationError when some step has zero probability
    under every state, or under every state reachable given the history.
    """
    params.validate()
    E = emission_loglik_matrix(params, obs.t_counts, obs.c_counts)  # (T, K)
    T, K = E.shape
    m = E.max(axis=1)
    bad = np.where(np.isneginf(m))[0]
    if bad.size:
        raise ImpossibleObservationError(int(bad[0]), "all states give zero emission")
    b = np.exp(E - m[:, None])

    alphas = np.empty((T, K))
    scales = np.empty(T)
    a = params.pi * b[0]
    for tau in range(T):
        if tau > 0:
            a = (alphas[tau - 1] @ params.trans) * b[tau]
        s = a.sum()
        if s <= 0.0:
            raise ImpossibleObservationError(tau, "zero probability given history")
        scales[tau] = s
        alphas[tau] = a / s
    loglik = float(np.log(scales).sum() + m.sum())

    betas = np.empty((T, K))
    betas[T - 1] = 1.0
    for tau in range(T - 2, -1, -1):
        w = b[tau + 1] * betas[tau + 1]
        betas[tau] = (params.trans @ w) / scales[tau + 1]

    gamma = alphas * betas
    xi = np.empty((max(T - 1, 0), K, K))
    for tau in range(T - 1):
        w = b[tau + 1] * betas[tau + 1] / scales[tau + 1]
        xi[tau] = alphas[tau][:, None] * params.trans * w[None, :]
    return PosteriorMarginals(gamma=gamma, xi=xi, loglik=loglik)


def viterbi(params: HmmParams, obs: ObservationSequence) -> tuple[np.ndarray, float]:
    """Most likely state path and its joint log-probability.

    Ties break toward the lower state index at each backtrack step.
    """
    params.validate()
    E = emission_loglik_matrix(params, obs.t_counts, obs.c_counts)
    T, K = E.shape
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pi)
        log_a = np.log(params.trans)
    delta = log_pi + E[0]
    psi = np.zeros((T, K), dtype=np.int64)
    if np.isneginf(delta).all():
        raise ImpossibleObservationError(0)
    for tau in range(1, T):
        cand = delta[:, None] + log_a  # (from, to)
        psi[tau] = np.argmax(cand, axis=0)  # lowest index wins ties
        delta = cand[psi[tau], np.arange(K)] + E[tau]
        if np.isneginf(delta).all():
            raise ImpossibleObservationError(tau)
    path = np.empty(T, dtype=np.int64)
    path[T - 1] = int(np.argmax(delta))
    for tau in range(T - 2, -1, -1):
        path[tau] = psi[tau + 1][path[tau + 1]]
    return path, float(delta[path[T - 1]])


# ---- Baum-Welch ----


def _batch_estep(params: HmmParams, t: np.ndarray, c: np.ndarray):
    """Forward-backward over N equal-length sequences stacked as (N, T).

    Returns (total loglik, gamma (N,T,K), xi summed over sequences and
    steps (K,K)).
    """
    E = emission_loglik_matrix(params, t, c)  # (N, T, K)
    N, T, K = E.shape
    m = E.max(axis=2)
    if np.isneginf(m).any():
        n, tau = np.argwhere(np.isneginf(m))[0]
        raise ImpossibleObservationError(int(tau), f"sequence {n}")
    b = np.exp(E - m[:, :, None])

    alphas = np.empty_like(b)
    scales = np.empty((N, T))
    a = params.pi[None, :] * b[:, 0]
    for tau in range(T):
        if tau > 0:
            a = (alphas[:, tau - 1] @ params.trans) * b[:, tau]
        s = a.sum(axis=1)
        if (s <= 0.0).any():
            n = int(np.where(s <= 0.0)[0][0])
            raise ImpossibleObservationError(tau, f"sequence {n}")
        scales[:, tau] = s
        alphas[:, tau] = a / s[:, None]
    loglik = float(np.log(scales).sum() + m.sum())

    betas = np.empty_like(b)
    betas[:, T - 1] = 1.0
    xi_sum = np.zeros((K, K))
    for tau in range(T - 2, -1, -1):
        w = b[:, tau + 1] * betas[:, tau + 1] / scales[:, tau + 1][:, None]
        betas[:, tau] = w @ params.trans.T
        xi_sum += (alphas[:, tau].T @ w) * params.trans
    gamma = alphas * betas
    return loglik, gamma, xi_sum


def _group_by_length(obs_set: list[ObservationSequence]):
    groups: dict[int, list[int]] = {}
    for idx, obs in enumerate(obs_set):
        groups.setdefault(len(obs), []).append(idx)
    for length in sorted(groups):
        idxs = groups[length]
        t = np.stack([obs_set[i].t_counts for i in idxs])
        c = np.stack([obs_set[i].c_counts for i in idxs])
        yield t, c


def _initial_params(
    obs_set: list[ObservationSequence], k: int, jitter: np.random.Generator | None
) -> HmmParams:
    """Quantile split of pooled (t, c) pairs by terror share; optional jitter."""
    t = np.concatenate([o.t_counts for o in obs_set]).astype(float)
    c = np.concatenate([o.c_counts for o in obs_set]).astype(float)
    share = t / (t + c + _SHARE_EPS)
    order = np.argsort(-share, kind="stable")
    lam_t = np.array([max(t[g].mean(), RATE_FLOOR) for g in np.array_split(order, k)])
    lam_c = np.array([max(c[g].mean(), RATE_FLOOR) for g in np.array_split(order, k)])
    if jitter is not None:
        lam_t = lam_t * np.exp(jitter.normal(0.0, 0.3, size=k))
        lam_c = lam_c * np.exp(jitter.normal(0.0, 0.3, size=k))
    pi = np.full(k, 1.0 / k)
    trans = np.full((k, k), 0.2 / (k - 1)) if k > 1 else np.ones((1, 1))
    if k > 1:
        np.fill_diagonal(trans, 0.8)
    return HmmParams(pi=pi, trans=trans, lambda_t=lam_t, lambda_c=lam_c)


def _em_run(
    obs_set: list[ObservationSequence],
    init: HmmParams,
    tol: float,
    max_iter: int,
    rate_floor: float,
) -> tuple[HmmParams, list[float]]:
    params = init
    k = init.n_states
    n_seq = len(obs_set)
    trace: list[float] = []
    prev_ll = -np.inf
    for _ in range(max_iter):
        ll = 0.0
        pi_acc = np.zeros(k)
        xi_acc = np.zeros((k, k))
        resp = np.zeros(k)
        t_acc = np.zeros(k)
        c_acc = np.zeros(k)
        for t, c in _group_by_length(obs_set):
            gll, gamma, xi_sum = _batch_estep(params, t, c)
            ll += gll
            pi_acc += gamma[:, 0, :].sum(axis=0)
            xi_acc += xi_sum
            resp += gamma.sum(axis=(0, 1))
            t_acc += np.einsum("ntk,nt->k", gamma, t.astype(float))
            c_acc += np.einsum("ntk,nt->k", gamma, c.astype(float))
        trace.append(ll)
        if trace[:-1] and (ll - prev_ll) < tol * max(1.0, abs(prev_ll)):
            break
        prev_ll = ll

        pi = pi_acc / n_seq
        starved = resp < 1e-12
        if starved.any():
            warnings.warn(
                f"state(s) {np.where(starved)[0].tolist()} have ~zero responsibility; "
                f"rate floor {rate_floor} applied",
                RuntimeWarning,
                stacklevel=2,
            )
        rowsum = xi_acc.sum(axis=1, keepdims=True)
        trans = np.where(rowsum > 0.0, xi_acc / np.where(rowsum > 0, rowsum, 1.0), 1.0 / k)
        with np.errstate(invalid="ignore"):
            lam_t = np.where(starved, rate_floor, np.maximum(t_acc / np.where(starved, 1.0, resp), rate_floor))
            lam_c = np.where(starved, rate_floor, np.maximum(c_acc / np.where(starved, 1.0, resp), rate_floor))
        params = HmmParams(pi=pi / pi.sum(), trans=trans, lambda_t=lam_t, lambda_c=lam_c)
    return params, trace


def baum_welch_fit(
    obs_set: ObservationSequence | list[ObservationSequence],
    k: int,
    init: HmmParams | None = None,
    tol: float = 1e-6,
    max_iter: int = 500,
    n_restarts: int = 10,
    seed: int = 0,
    rate_floor: float = RATE_FLOOR,
) -> tuple[HmmParams, list[float]]:
    """Maximum-likelihood fit over one or more observation sequences.

    Returns the canonically relabeled parameters and the log-likelihood
    trace of the winning run. The trace is non-decreasing (EM guarantee)
    and its last entry is the log-likelihood of the returned parameters.

    With `init` given, a single EM run starts there; otherwise restarts
    start from a terror-share quantile split, jittered per restart on a
    stream keyed by (seed, restart), and the best final log-likelihood
    wins.
    """
    if isinstance(obs_set, ObservationSequence):
        obs_set = [obs_set]
    if not obs_set:
        raise ValueError("obs_set must contain at least one sequence")
    if k < 1:
        raise ValueError("k must be >= 1")
    if init is not None:
        init.validate()
        if init.n_states != k:
            raise ValueError("init has wrong number of states")
        best = _em_run(obs_set, init, tol, max_iter, rate_floor)
    else:
        best = None
        for restart in range(max(1, n_restarts)):
            jitter = rng.stream(seed, "bw-init", restart) if restart else None
            start = _initial_params(obs_set, k, jitter)
            result = _em_run(obs_set, start, tol, max_iter, rate_floor)
            if best is None or result[1][-1] > best[1][-1]:
                best = result
    params, trace = best
    return canonicalize(params), trace


def decode_panel(
    params: HmmParams,
    panel,
    cell_trans: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell Viterbi paths and smoothed marginals for a whole panel.

    `cell_trans` (n_cells, K, K) substitutes a per-cell transition matrix
    (covariate perturbation) at decode time; fitting is unaffected.

    Returns (field (n_cells, n_years) int, gamma (n_cells, n_years, K)).
    """
    k = params.n_states
    field = np.empty((panel.n_cells, panel.n_years), dtype=np.int64)
    gammas = np.empty((panel.n_cells, panel.n_years, k))
    for cell in range(panel.n_cells):
        p = params
        if cell_trans is not None:
            p = HmmParams(params.pi, cell_trans[cell], params.lambda_t, params.lambda_c)
        obs = ObservationSequence(panel.t[cell], panel.c[cell])
        field[cell], _ = viterbi(p, obs)
        gammas[cell] = forward_backward(p, obs).gamma
    return field, gammas


# ---- serialization (versioned plain text, 17 significant digits) ----

_FORMAT_TAG = "tercon-hmm-params v1"


def _fmt(values: np.ndarray) -> str:
    return " ".join(f"{v:.17g}" for v in values)


def write_params(params: HmmParams, path: str | Path) -> None:
    """Field order: k, pi, trans rows, lambda_t, lambda_c. Reload is bit-exact."""
    params.validate()
    lines = [_FORMAT_TAG, f"k {params.n_states}", f"pi {_fmt(params.pi)}"]
    lines += [f"trans {_fmt(row)}" for row in params.trans]
    lines += [f"lambda_t {_fmt(params.lambda_t)}", f"lambda_c {_fmt(params.lambda_c)}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_params(path: str | Path) -> HmmParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _FORMAT_TAG:
        raise ValueError(f"{path}: not a {_FORMAT_TAG} file")
    fields: list[tuple[str, str]] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        key, _, rest = line.partition(" ")
        fields.append((key, rest))
    if fields[0][0] != "k":
        raise ValueError(f"{path}: expected 'k' after format tag")
    k = int(fields[0][1])
    rows = {key: [] for key in ("pi", "trans", "lambda_t", "lambda_c")}
    for key, rest in fields[1:]:
        if key not in rows:
            raise ValueError(f"{path}: unexpected field {key!r}")
        rows[key].append([float(x) for x in rest.split()])
    if len(rows["trans"]) != k:
        raise ValueError(f"{path}: expected {k} trans rows")
    params = HmmParams(
        pi=np.array(rows["pi"][0]),
        trans=np.array(rows["trans"]),
        lambda_t=np.array(rows["lambda_t"][0]),
        lambda_c=np.array(rows["lambda_c"][0]),
    )
    params.validate()
    return params
