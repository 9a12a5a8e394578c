"""Quantitative evaluation of trained energy models.

Partition-function estimates come in three flavors that deliberately do
not share code: a grid quadrature oracle (exact up to discretization,
dimensions 1-2 only), annealed importance sampling (stochastic lower
bound in expectation), and its reverse-annealed counterpart (stochastic
upper bound). [raise, ais] therefore brackets the true logZ, and the
quadrature value should fall inside the bracket.

The remaining metrics are standard: Mann-Whitney AUROC, the Gaussian
Frechet distance in Dowson-Landau closed form, a two-sample KS statistic,
lowest-energy-label classification, PGD attacks on energy logits, and
sample/mode assignment fractions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, DataError, DegenerateEstimateError,
                     DimensionError, LabelError)
from .sampler import refine_bounded

__all__ = [
    "AISConfig",
    "log_partition_quadrature",
    "ais_logZ",
    "raise_logZ",
    "auroc",
    "frechet_gaussian",
    "ks_statistic",
    "energy_classify",
    "refined_classify",
    "pgd_attack",
    "mode_coverage",
    "metric_csv_row",
]


def _input_dim(net):
    if hasattr(net, "config"):
        return net.config.input_dim
    return net.dim


# ---------------------------------------------------------------------------
# quadrature oracle

def log_partition_quadrature(net, bounds, resolution):
    """log of the midpoint-rule integral of exp(-E) over a box.

    bounds is one (lo, hi) pair applied to every coordinate, or a
    sequence of per-coordinate pairs; resolution is the grid spacing.
    Only 1- and 2-dimensional inputs are supported: the grid is dense.
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    model_dim = _input_dim(net)
    if bounds.ndim == 1:
        bounds = np.tile(bounds[None, :], (model_dim, 1))
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise DimensionError(f"bounds must be (lo, hi) pairs, got shape {bounds.shape}")
    d = bounds.shape[0]
    if d != model_dim:
        raise DimensionError(f"{d} bounds for a {model_dim}-dimensional model")
    if d > 2:
        raise DimensionError(f"quadrature supports 1 or 2 dimensions, got {d}")
    if np.any(bounds[:, 1] <= bounds[:, 0]):
        raise ConfigError("each bound needs lo < hi")
    if not resolution > 0:
        raise ConfigError("resolution must be > 0")

    axes = []
    for lo, hi in bounds:
        n = max(1, int(round((hi - lo) / resolution)))
        h = (hi - lo) / n
        axes.append(lo + h * (np.arange(n) + 0.5))
    log_cell = float(np.sum([np.log((hi - lo) / len(ax))
                             for (lo, hi), ax in zip(bounds, axes)]))

    if d == 1:
        grid = axes[0][:, None]
    else:
        a, b = np.meshgrid(axes[0], axes[1], indexing="ij")
        grid = np.stack([a.ravel(), b.ravel()], axis=1)

    # chunked evaluation: fine 2D grids do not fit in one batch comfortably
    chunk = 262144
    log_terms = np.empty(grid.shape[0])
    for start in range(0, grid.shape[0], chunk):
        log_terms[start:start + chunk] = -net.energy(grid[start:start + chunk])
    m = log_terms.max()
    return float(m + np.log(np.sum(np.exp(log_terms - m))) + log_cell)


# ---------------------------------------------------------------------------
# annealed importance sampling

@dataclass
class AISConfig:
    """Annealing setup shared by the forward and reverse estimators.

    The inverse-temperature ladder is geometric: beta_0 = 0, then
    geomspace(1e-3, 1) over the remaining rungs, so early rungs are
    densely spaced where the integrand changes fastest.
    """

    chains: int = 256
    temps: int = 100
    transitions: int = 2
    base: str = "uniform"
    step_size: float = 0.05
    drift_clip: float = 2.0

    def __post_init__(self):
        if self.chains < 1:
            raise ConfigError("chains must be >= 1")
        if self.temps < 1:
            raise ConfigError("temps must be >= 1")
        if self.transitions < 0:
            raise ConfigError("transitions must be >= 0")
        if self.base not in ("uniform", "gaussian"):
            raise ConfigError(f"base must be 'uniform' or 'gaussian', got {self.base!r}")
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        if not self.drift_clip > 0:
            raise ConfigError("drift_clip must be > 0")

    def ladder(self):
        if self.temps == 1:
            return np.array([0.0])
        betas = np.concatenate([[0.0], np.geomspace(1e-3, 1.0, self.temps - 1)])
        # geomspace is strictly increasing and starts above 0 by construction
        return betas


class _Base:
    """Base distribution used at beta = 0."""

    def __init__(self, kind, d):
        self.kind = kind
        self.d = d

    def sample(self, n, rng):
        if self.kind == "uniform":
            return rng.uniform(size=(n, self.d))
        return rng.normal(size=(n, self.d))

    def energy(self, x):
        if self.kind == "uniform":
            return np.zeros(x.shape[0])
        return 0.5 * np.sum(x * x, axis=1)

    def grad(self, x):
        if self.kind == "uniform":
            return np.zeros_like(x)
        return x

    def in_support(self, x):
        if self.kind == "uniform":
            return np.all((x >= 0.0) & (x <= 1.0), axis=1)
        return np.ones(x.shape[0], dtype=bool)

    @property
    def log_partition(self):
        if self.kind == "uniform":
            return 0.0
        return 0.5 * self.d * np.log(2.0 * np.pi)


def _rung_energy(net, base, beta, x):
    return (1.0 - beta) * base.energy(x) + beta * net.energy(x)


def _rung_grad(net, base, beta, x):
    return (1.0 - beta) * base.grad(x) + beta * net.grad_x(x)


def _tamed_drift(g, h, clip):
    """Langevin drift -h/2 g with its row norm capped at clip * sqrt(h).

    Far from a mode the raw drift can dwarf the proposal noise, pushing
    proposals so far uphill that every one is rejected and the chain
    freezes. Capping keeps acceptance alive; the proposal stays a
    Gaussian with a computable density, so the Metropolis correction is
    still exact and the rung distribution still invariant.
    """
    drift = -0.5 * h * g
    norms = np.linalg.norm(drift, axis=1, keepdims=True)
    limit = clip * np.sqrt(h)
    scale = np.where(norms > limit, limit / np.maximum(norms, 1e-300), 1.0)
    return drift * scale


def _mala_sweep(net, base, beta, x, u, cfg, rng):
    """Metropolis-adjusted Langevin transitions leaving the rung's
    distribution invariant. u carries the current rung energies so they
    are not recomputed; returns the updated (x, u)."""
    h = cfg.step_size
    for _ in range(cfg.transitions):
        g = _rung_grad(net, base, beta, x)
        mean_fwd = x + _tamed_drift(g, h, cfg.drift_clip)
        prop = mean_fwd + np.sqrt(h) * rng.normal(size=x.shape)
        ok = base.in_support(prop)
        u_prop = np.where(ok, _rung_energy(net, base, beta, prop), np.inf)
        g_prop = _rung_grad(net, base, beta, np.where(ok[:, None], prop, x))
        mean_bwd = prop + _tamed_drift(g_prop, h, cfg.drift_clip)
        log_q_fwd = -np.sum((prop - mean_fwd) ** 2, axis=1) / (2.0 * h)
        log_q_bwd = -np.sum((x - mean_bwd) ** 2, axis=1) / (2.0 * h)
        with np.errstate(invalid="ignore"):
            log_accept = (u - u_prop) + (log_q_bwd - log_q_fwd)
        accept = np.log(rng.uniform(size=x.shape[0])) < log_accept
        x = np.where(accept[:, None], prop, x)
        u = np.where(accept, u_prop, u)
    return x, u


def _log_mean_exp(logw):
    if np.all(np.isneginf(logw)):
        raise DegenerateEstimateError("all annealing weights vanished")
    m = np.max(logw)
    return float(m + np.log(np.mean(np.exp(logw - m))))


def ais_logZ(net, cfg, rng):
    """Forward-annealed estimate of log Z = log integral exp(-E).

    Returns (estimate, standard_error). The estimate is a stochastic
    lower bound of logZ in expectation (Jensen applied to the log of the
    mean weight).
    """
    d = _input_dim(net)
    base = _Base(cfg.base, d)
    betas = cfg.ladder()
    x = base.sample(cfg.chains, rng)
    logw = np.zeros(cfg.chains)
    e_base = base.energy(x)
    e_target = net.energy(x)
    for t in range(1, len(betas)):
        logw += (betas[t] - betas[t - 1]) * (e_base - e_target)
        u = (1.0 - betas[t]) * e_base + betas[t] * e_target
        x, u = _mala_sweep(net, base, betas[t], x, u, cfg, rng)
        e_base = base.energy(x)
        e_target = net.energy(x)
    estimate = base.log_partition + _log_mean_exp(logw)
    m = np.max(logw)
    w = np.exp(logw - m)
    if cfg.chains > 1:
        se = float(np.std(w, ddof=1) / (np.mean(w) * np.sqrt(cfg.chains)))
    else:
        se = 0.0
    return estimate, se


def raise_logZ(net, cfg, rng, samples):
    """Reverse-annealed counterpart of ais_logZ.

    samples approximate draws from the model (typically a replay-buffer
    snapshot); chains start there and anneal down to the base, giving a
    stochastic upper bound of logZ in expectation, so that
    [raise_logZ, ais_logZ] brackets the truth.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise DataError(f"samples must be a nonempty (n, d) array, got {samples.shape}")
    d = _input_dim(net)
    if samples.shape[1] != d:
        raise DimensionError(f"samples have dimension {samples.shape[1]}, model wants {d}")
    base = _Base(cfg.base, d)
    betas = cfg.ladder()
    rows = rng.integers(0, samples.shape[0], size=cfg.chains)
    x = samples[rows]
    logw = np.zeros(cfg.chains)
    e_base = base.energy(x)
    e_target = net.energy(x)
    for t in range(len(betas) - 2, -1, -1):
        logw += (betas[t + 1] - betas[t]) * (e_target - e_base)
        u = (1.0 - betas[t]) * e_base + betas[t] * e_target
        x, u = _mala_sweep(net, base, betas[t], x, u, cfg, rng)
        e_base = base.energy(x)
        e_target = net.energy(x)
    return base.log_partition - _log_mean_exp(logw)


# ---------------------------------------------------------------------------
# distribution comparison

def auroc(scores_in, scores_out):
    """Probability a random in-distribution score exceeds a random
    out-of-distribution score, ties counted one half (Mann-Whitney)."""
    a = np.asarray(scores_in, dtype=np.float64).ravel()
    b = np.asarray(scores_out, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise DataError("auroc needs nonempty score lists")
    combined = np.concatenate([a, b])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size)
    sorted_vals = combined[order]
    # average ranks over tied runs
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[:a.size].sum()
    u = rank_sum - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def _clamped_psd(cov, floor=1e-10):
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def frechet_gaussian(samples_a, samples_b):
    """Frechet distance between Gaussians fitted to two sample sets:
    ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2))."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError("sample sets must be (n, d) with matching d")
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise DataError(f"need at least d+1 = {d + 1} samples per set to fit a covariance")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = _clamped_psd(np.cov(a, rowvar=False).reshape(d, d))
    cov_b = _clamped_psd(np.cov(b, rowvar=False).reshape(d, d))
    # tr((Sa Sb)^1/2) via the symmetric product Sb^1/2 Sa Sb^1/2
    vals_b, vecs_b = np.linalg.eigh(cov_b)
    sqrt_b = (vecs_b * np.sqrt(np.maximum(vals_b, 0.0))) @ vecs_b.T
    inner = sqrt_b @ cov_a @ sqrt_b
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    trace_sqrt = np.sum(np.sqrt(np.maximum(vals, 0.0)))
    diff = mu_a - mu_b
    dist = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(dist, 0.0)


def ks_statistic(a, b):
    """Two-sample Kolmogorov-Smirnov statistic: sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise DataError("ks_statistic needs nonempty samples")
    grid = np.concatenate([a, b])
    f_a = np.searchsorted(a, grid, side="right") / a.size
    f_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(f_a - f_b).max())


# ---------------------------------------------------------------------------
# classification, attack, coverage

def _class_energies(net, x):
    n_classes = net.config.num_classes
    if n_classes <= 0:
        raise LabelError("energy_classify needs a conditional model")
    x = np.asarray(x, dtype=np.float64)
    cols = [net.energy(x, labels=np.full(x.shape[0], c, dtype=np.intp))
            for c in range(n_classes)]
    return np.stack(cols, axis=1)


def energy_classify(net, x):
    """Lowest-energy label per row; ties go to the lowest class index."""
    return np.argmin(_class_energies(net, x), axis=1)


def refined_classify(net, x, eps, cfg, rng):
    """Classify after bounded refinement.

    For each candidate class the inputs relax within an L-infinity ball
    of radius eps under that class's energy; the class whose refined
    point scores lowest wins. Off-manifold perturbations sit on thin
    high-energy ridges, and a short bounded chain falls off the ridge
    into the basin of the true class, so this recovers accuracy that
    plain lowest-energy classification loses to an attack.
    """
    n_classes = net.config.num_classes
    if n_classes <= 0:
        raise LabelError("refined_classify needs a conditional model")
    x = np.asarray(x, dtype=np.float64)
    scores = np.empty((x.shape[0], n_classes))
    for c in range(n_classes):
        labels = np.full(x.shape[0], c, dtype=np.intp)
        refined = refine_bounded(x, eps, net, cfg, rng, labels=labels)
        scores[:, c] = net.energy(refined, labels=labels)
    return np.argmin(scores, axis=1)


def pgd_attack(net, x, y_true, eps, steps=20, step_size=None, norm="linf"):
    """Projected gradient ascent on the cross-entropy of energy logits.

    Logits are negative per-class energies. Deterministic: iterates start
    at x itself (no random restart). Every step is projected back to the
    eps-ball around the input and to the unit cube.
    """
    if not eps > 0:
        raise ConfigError("eps must be > 0")
    if norm not in ("linf", "l2"):
        raise ConfigError(f"norm must be 'linf' or 'l2', got {norm!r}")
    if step_size is None:
        step_size = eps / 4.0
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.intp)
    n_classes = net.config.num_classes
    adv = x0.copy()
    for _ in range(int(steps)):
        energies = _class_energies(net, adv)
        logits = -energies
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        # d CE / d x = sum_c (1[c=y] - p_c) * dE_c/dx
        grad = np.zeros_like(adv)
        for c in range(n_classes):
            coeff = (y == c).astype(np.float64) - probs[:, c]
            grad += coeff[:, None] * net.grad_x(
                adv, labels=np.full(adv.shape[0], c, dtype=np.intp))
        if norm == "linf":
            adv = adv + step_size * np.sign(grad)
            adv = x0 + np.clip(adv - x0, -eps, eps)
        else:
            norms = np.linalg.norm(grad, axis=1, keepdims=True)
            adv = adv + step_size * grad / np.maximum(norms, 1e-12)
            delta = adv - x0
            dn = np.linalg.norm(delta, axis=1, keepdims=True)
            adv = x0 + delta * np.minimum(1.0, eps / np.maximum(dn, 1e-12))
        adv = np.clip(adv, 0.0, 1.0)
    return adv


def mode_coverage(samples, centers, radius):
    """Fraction of samples within radius of each center (nearest-center
    assignment), plus the unassigned remainder."""
    if not radius > 0:
        raise ConfigError("radius must be > 0")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    samples = np.asarray(samples, dtype=np.float64)
    k = centers.shape[0]
    if samples.size == 0:
        return np.zeros(k), 0.0
    samples = np.atleast_2d(samples)
    dists = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2)
    nearest = dists.argmin(axis=1)
    within = dists[np.arange(samples.shape[0]), nearest] <= radius
    fractions = np.bincount(nearest[within], minlength=k) / samples.shape[0]
    return fractions, float(1.0 - within.mean())


# ---------------------------------------------------------------------------
# reporting

def metric_csv_row(metric, value, **config):
    """One CSV row 'metric,config_hash,value'; the hash is over the
    sorted config items so identical setups collide on purpose."""
    payload = json.dumps(sorted(config.items()), default=str)
    digest = hashlib.sha256(payload.encode()).hexdigest()[:12]
    return f"{metric},{digest},{value:.10g}"
