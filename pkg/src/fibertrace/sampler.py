"""Posterior sampling of the spatially smoothed tensor field.

Single-site Metropolis-Hastings over per-voxel tensors with Wishart
proposals centered at the current value, a Gibbs update of the noise
variance, and a log-normal random-walk update of the field degrees of
freedom. The proposal dof is tuned during burn-in toward a target
acceptance rate and frozen afterwards so the retained chain has a fixed
kernel.

``run_chain`` drives a compiled kernel; the module-level update functions
are the readable reference implementations used by the tests to pin the
kernel's semantics.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels, spd
from .errors import NotPositiveDefinite
from .grid import GridDims
from .leastsq import fit_all, project_to_pd
from .signals import quadratic_features, voxel_log_likelihood

__all__ = [
    "SamplerConfig",
    "ChainState",
    "PosteriorDraws",
    "preset",
    "initial_state",
    "conditional_log_target",
    "update_tensor_site",
    "update_sigma2",
    "update_k",
    "tune_proposal_dof",
    "run_chain",
    "posterior_mean",
]

K_BOUNDS = (3.0, 50.0)
Q_BOUNDS = (2.5, 1e6)
_EYE = np.eye(3)


@dataclass(frozen=True)
class SamplerConfig:
    """Chain schedule and tuning knobs.

    ``retained`` draws are stored after ``burn_in`` sweeps, keeping every
    ``thin``-th sweep. The proposal dof is adapted once per
    ``tune_batch`` sweeps during burn-in only.
    """

    burn_in: int = 3000
    retained: int = 2000
    thin: int = 10
    target_accept: float = 0.4
    seed: int = 0
    scan: str = "rank"
    tune_batch: int = 50
    tune_gain: float = 2.5
    q_init: float = 100.0
    k_init: float = 10.0
    k_step: float = 0.1

    def __post_init__(self):
        for name in ("burn_in", "retained", "thin", "tune_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.scan not in ("rank", "random"):
            raise ValueError(f"scan must be 'rank' or 'random', got {self.scan!r}")
        if not K_BOUNDS[0] < self.k_init < K_BOUNDS[1]:
            raise ValueError(f"k_init must lie in {K_BOUNDS}")
        if self.q_init <= 2.0:
            raise ValueError("q_init must exceed 2")

    @property
    def total_sweeps(self):
        return self.burn_in + self.retained * self.thin


_PRESETS = {
    # desk-scale default and the publication-scale schedule (thin 100)
    "desk": dict(burn_in=3000, retained=2000, thin=10),
    "paper": dict(burn_in=3000, retained=2000, thin=100),
}


def preset(name, **overrides):
    """Named sampler schedule ('desk' or 'paper') with optional overrides."""
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    return SamplerConfig(**{**_PRESETS[name], **overrides})


@dataclass
class ChainState:
    """Current chain position: tensor field, noise variance, dofs."""

    tensors: np.ndarray
    sigma2: float
    k: float
    q: float

    def __post_init__(self):
        t = np.asarray(self.tensors, dtype=np.float64)
        if t.ndim != 3 or t.shape[1:] != (3, 3):
            raise ValueError(f"tensors must have shape (n, 3, 3), got {t.shape}")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if not K_BOUNDS[0] < self.k < K_BOUNDS[1]:
            raise ValueError(f"k must lie in {K_BOUNDS}, got {self.k}")
        if self.q <= 2.0:
            raise ValueError("q must exceed 2")
        self.tensors = t

    def copy(self):
        return ChainState(self.tensors.copy(), self.sigma2, self.k, self.q)


@dataclass
class PosteriorDraws:
    """Retained thinned draws plus acceptance diagnostics."""

    dims: GridDims
    tensors: np.ndarray
    sigma2: np.ndarray
    k: np.ndarray
    accept_rate: np.ndarray
    accept_rate_k: float
    q_final: float
    config: SamplerConfig = None

    @property
    def n_draws(self):
        return self.tensors.shape[0]


def _parent_average(tensors, graph, v):
    pars = graph.parents(v)
    if len(pars) == 0:
        return _EYE
    acc = np.zeros((3, 3))
    for u in pars:
        acc += tensors[u]
    return acc / len(pars)


def _parent_average_swapped(tensors, graph, u, site, a_new):
    pars = graph.parents(u)
    acc = np.zeros((3, 3))
    for w in pars:
        acc += a_new if w == site else tensors[w]
    return acc / len(pars)


def conditional_log_target(a_star, v, state, data, graph):
    """Log full conditional of the tensor at voxel v evaluated at a_star.

    Sum of the voxel's Gaussian log likelihood, the Wishart prior term
    given the parent average (identity mean at roots), and one Wishart
    term per child whose parent average shifts when v moves. Children's
    averages divide by the child's own parent count.
    """
    total = voxel_log_likelihood(a_star, v, data, state.sigma2)
    total += spd.wishart_logpdf(a_star, _parent_average(state.tensors, graph, v),
                                state.k)
    for u in graph.children(v):
        mean_u = _parent_average_swapped(state.tensors, graph, int(u), v, a_star)
        total += spd.wishart_logpdf(state.tensors[u], mean_u, state.k)
    return total


def _log_accept_ratio(a_new, v, state, data, graph):
    """Log MH ratio for moving voxel v to a_new under the Wishart proposal."""
    a_cur = state.tensors[v]
    delta = (conditional_log_target(a_new, v, state, data, graph)
             - conditional_log_target(a_cur, v, state, data, graph))
    correction = (spd.wishart_logpdf(a_cur, a_new, state.q)
                  - spd.wishart_logpdf(a_new, a_cur, state.q))
    return delta + correction


def update_tensor_site(v, state, data, graph, rng):
    """One Metropolis-Hastings update of the tensor at voxel v.

    Proposes from the Wishart centered at the current tensor with the
    proposal dof; proposals failing the PD check are rejected outright
    (before the accept draw, keeping the stream aligned with the compiled
    kernel). Returns True on acceptance.
    """
    a_new = spd.sample_wishart(state.tensors[v], state.q, rng)
    if not spd.is_spd(a_new):
        return False
    try:
        logr = _log_accept_ratio(a_new, v, state, data, graph)
    except NotPositiveDefinite:
        return False
    if math.isnan(logr):
        return False
    if math.log(rng.random()) < logr:
        state.tensors[v] = a_new
        return True
    return False


def update_sigma2(state, data, rng):
    """Gibbs draw of the noise variance from its inverse-gamma conditional.

    The precision is Gamma with shape M*n/2 + 0.01 and rate SSR/2 + 0.01,
    where SSR sums squared residuals of the mean model over all
    measurements and voxels.
    """
    proto = data.protocol
    feats = quadratic_features(proto.gradients)
    packed = np.stack([spd.pack(t) for t in state.tensors], axis=1)
    mean = proto.log_s0[np.newaxis, :] - proto.b * (feats @ packed)
    resid = data.log_signals - mean
    ssr = float(np.sum(resid * resid))
    shape = 0.5 * proto.n_measurements * data.dims.n + 0.01
    rate = 0.5 * ssr + 0.01
    precision = rng.gamma(shape, 1.0 / rate)
    state.sigma2 = 1.0 / precision


def update_k(state, graph, rng, step=0.1, bounds=K_BOUNDS):
    """Log-normal random-walk update of the field degrees of freedom.

    Proposals outside the flat prior support are rejected before the
    accept draw; inside it the log ratio is the field prior difference
    plus the proposal Jacobian log(k'/k). Returns True on acceptance.
    """
    k_cur = state.k
    z = rng.standard_normal()
    k_prop = k_cur * math.exp(step * z)
    if not bounds[0] < k_prop < bounds[1]:
        return False
    logr = math.log(k_prop / k_cur)
    for v in range(graph.dims.n):
        mean_v = _parent_average(state.tensors, graph, v)
        logr += (spd.wishart_logpdf(state.tensors[v], mean_v, k_prop)
                 - spd.wishart_logpdf(state.tensors[v], mean_v, k_cur))
    if math.log(rng.random()) < logr:
        state.k = k_prop
        return True
    return False


def tune_proposal_dof(q, batch_rate, batch_index, target=0.4, gain=2.5):
    """One stochastic-approximation step on the proposal dof.

    Acceptance increases with the proposal dof (larger dof = tighter
    proposals), so the dof moves up when the batch acceptance rate is
    below target: log q += gain/batch_index * (target - rate). The result
    is clamped to a safe range.
    """
    if batch_index < 1:
        raise ValueError("batch_index counts from 1")
    step = (gain / batch_index) * (target - batch_rate)
    q_new = q * math.exp(step)
    return min(max(q_new, Q_BOUNDS[0]), Q_BOUNDS[1])


def initial_state(data, graph, config):
    """Warm start: least-squares tensors projected to PD, residual variance."""
    ls = fit_all(data)
    tensors = np.empty_like(ls)
    for v in range(ls.shape[0]):
        tensors[v] = project_to_pd(ls[v])
    proto = data.protocol
    feats = quadratic_features(proto.gradients)
    packed = np.stack([spd.pack(t) for t in ls], axis=1)
    mean = proto.log_s0[np.newaxis, :] - proto.b * (feats @ packed)
    resid = data.log_signals - mean
    sigma2 = max(float(np.mean(resid * resid)), 1e-8)
    return ChainState(tensors, sigma2, config.k_init, config.q_init)


def _kernel_inputs(data, graph):
    proto = data.protocol
    bfeat = np.ascontiguousarray(proto.b * quadratic_features(proto.gradients))
    y = np.ascontiguousarray(data.log_signals.T)
    log_s0 = np.ascontiguousarray(proto.log_s0)
    return bfeat, y, log_s0


def run_chain(data, graph, config, rng=None):
    """Run the full sampler and return thinned post-burn-in draws.

    Each sweep updates every voxel site (rank order by default), then the
    noise variance, then the field dof. The proposal dof adapts in
    ``tune_batch``-sweep batches during burn-in and is frozen afterwards.
    Deterministic given the config seed (or a caller-supplied generator).
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    state = initial_state(data, graph, config)
    n = graph.dims.n
    bfeat, y, log_s0 = _kernel_inputs(data, graph)
    order = np.arange(n, dtype=np.int64)
    random_scan = config.scan == "random"
    mn_half = 0.5 * data.protocol.n_measurements * n

    scal = np.array([state.sigma2, state.k, state.q])
    accept_sites = np.zeros(n, dtype=np.int64)
    tensors = state.tensors  # mutated in place by the kernel

    def advance(n_sweeps):
        return _kernels.run_sweeps(
            rng, n_sweeps, tensors, scal,
            graph.parent_indptr, graph.parent_indices,
            graph.child_indptr, graph.child_indices,
            order, random_scan, bfeat, y, log_s0,
            mn_half, config.k_step, K_BOUNDS[0], K_BOUNDS[1],
            accept_sites,
        )

    # burn-in with proposal adaptation
    done = 0
    batch_index = 0
    while done < config.burn_in:
        chunk = min(config.tune_batch, config.burn_in - done)
        before = int(accept_sites.sum())
        advance(chunk)
        done += chunk
        batch_index += 1
        rate = (int(accept_sites.sum()) - before) / (chunk * n)
        scal[2] = tune_proposal_dof(
            scal[2], rate, batch_index, config.target_accept, config.tune_gain
        )

    # retained phase: proposal frozen, store every thin-th sweep
    draws_t = np.empty((config.retained, n, 3, 3))
    draws_s2 = np.empty(config.retained)
    draws_k = np.empty(config.retained)
    accept_sites_ret = np.zeros(n, dtype=np.int64)
    accepted_k = 0
    for t in range(config.retained):
        before = accept_sites.copy()
        accepted_k += advance(config.thin)
        accept_sites_ret += accept_sites - before
        draws_t[t] = tensors
        draws_s2[t] = scal[0]
        draws_k[t] = scal[1]

    retained_sweeps = config.retained * config.thin
    return PosteriorDraws(
        dims=graph.dims,
        tensors=draws_t,
        sigma2=draws_s2,
        k=draws_k,
        accept_rate=accept_sites_ret / retained_sweeps,
        accept_rate_k=accepted_k / retained_sweeps,
        q_final=float(scal[2]),
        config=config,
    )


def posterior_mean(draws):
    """Entrywise posterior mean of the tensor field, shape (n, 3, 3)."""
    return draws.tensors.mean(axis=0)
