"""Langevin-dynamics sampling with replay-buffer chain initialization.

One step moves a batch of states downhill on the energy surface with
additive Gaussian noise:

    x' = x - step_size * clip(grad_E(x), +-grad_clip) + noise * N(0, I)

Step size and noise scale are configured independently. (The classical
coupling would set noise = sqrt(2 * step_size); decoupling them is what
makes small-noise sampling with aggressive step sizes workable, at the
cost of targeting a slightly tempered version of exp(-E).)

Chains are plain numpy: sampling never records onto an autodiff tape, so
negatives produced here act as constants in any downstream loss.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import (ChainDivergedError, ConfigError, DimensionError,
                     LabelError)


@dataclass
class LangevinConfig:
    """Chain hyperparameters.

    mask, when present, marks the components that are free to move; the
    rest stay bit-identical to the input. eps_box, when present, projects
    every step back into the L-infinity ball of that radius around the
    chain's initial state. clamp, when present, is a (lo, hi) pair and
    every step is projected into that box componentwise — training on
    data normalized to [0,1] keeps its chains on the data cube this way,
    which is what stops negatives from wandering into untrained territory.
    """

    steps: int = 60
    step_size: float = 10.0
    noise: float = 0.005
    grad_clip: float = 0.01
    mask: np.ndarray | None = None
    eps_box: float | None = None
    clamp: tuple | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if not self.grad_clip > 0:
            raise ConfigError("grad_clip must be > 0")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
        if self.eps_box is not None and not self.eps_box > 0:
            raise ConfigError("eps_box must be > 0 when set")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not lo < hi:
                raise ConfigError("clamp bounds must satisfy lo < hi")
            self.clamp = (float(lo), float(hi))


class ReplayBuffer:
    """Fixed-capacity FIFO store of past chain states (plus optional labels).

    New chains start from a stored state most of the time and from uniform
    noise on [0,1]^d otherwise; uniform_prob is that exception rate.
    """

    def __init__(self, capacity=10_000, uniform_prob=0.05):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        if not 0.0 <= uniform_prob <= 1.0:
            raise ConfigError("uniform_prob must lie in [0, 1]")
        self.capacity = int(capacity)
        self.uniform_prob = float(uniform_prob)
        self._data = None
        self._labels = None
        self._size = 0
        self._next = 0

    def __len__(self):
        return self._size

    @property
    def dim(self):
        return None if self._data is None else self._data.shape[1]

    @property
    def labeled(self):
        return self._labels is not None

    def insert(self, samples, labels=None):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2:
            raise DimensionError("buffer entries must be a (n, d) batch")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.intp)
            if labels.shape != (samples.shape[0],):
                raise LabelError("one label per inserted row required")
        if self._data is None:
            self._data = np.empty((self.capacity, samples.shape[1]))
            if labels is not None:
                self._labels = np.empty(self.capacity, dtype=np.intp)
        elif samples.shape[1] != self._data.shape[1]:
            raise DimensionError(
                f"buffer holds dimension {self._data.shape[1]}, got {samples.shape[1]}")
        if (labels is None) == (self._labels is not None):
            raise LabelError("buffer cannot mix labeled and unlabeled entries")
        if samples.shape[0] > self.capacity:
            # only the newest `capacity` rows can survive
            samples = samples[-self.capacity:]
            if labels is not None:
                labels = labels[-self.capacity:]
        n = samples.shape[0]
        pos = (self._next + np.arange(n)) % self.capacity
        self._data[pos] = samples
        if labels is not None:
            self._labels[pos] = labels
        self._next = int((self._next + n) % self.capacity)
        self._size = min(self.capacity, self._size + n)

    def draw(self, n, rng):
        if self._size == 0:
            raise ConfigError("cannot draw from an empty buffer")
        idx = rng.integers(0, self._size, size=n)
        if self._size < self.capacity:
            rows = idx
        else:
            rows = (self._next + idx) % self.capacity
        samples = self._data[rows].copy()
        labels = self._labels[rows].copy() if self._labels is not None else None
        return samples, labels

    def snapshot(self):
        """Entries oldest-first, as (samples, labels-or-None) copies."""
        if self._size == 0:
            d = 0 if self._data is None else self._data.shape[1]
            return np.empty((0, d)), (np.empty(0, dtype=np.intp) if self.labeled else None)
        if self._size < self.capacity:
            order = np.arange(self._size)
        else:
            order = (self._next + np.arange(self.capacity)) % self.capacity
        samples = self._data[order].copy()
        labels = self._labels[order].copy() if self._labels is not None else None
        return samples, labels

    def load(self, samples, labels=None):
        """Replace contents with the given oldest-first entries."""
        self._data = None
        self._labels = None
        self._size = 0
        self._next = 0
        if len(samples):
            self.insert(samples, labels)


def init_batch(buffer, batch_size, d, rng):
    """Starting states for a batch of chains.

    Each row comes from the buffer with probability 1 - uniform_prob and
    from uniform noise on [0,1]^d otherwise; an empty (or absent) buffer
    falls back to all-uniform. Returns (states, from_uniform flags).
    """
    if d < 1:
        raise DimensionError("d must be positive")
    if buffer is None or len(buffer) == 0:
        return rng.uniform(size=(batch_size, d)), np.ones(batch_size, dtype=bool)
    if buffer.dim != d:
        raise DimensionError(f"buffer dimension {buffer.dim} does not match {d}")
    from_uniform = rng.random(batch_size) < buffer.uniform_prob
    x = np.empty((batch_size, d))
    n_uni = int(from_uniform.sum())
    if n_uni:
        x[from_uniform] = rng.uniform(size=(n_uni, d))
    if n_uni < batch_size:
        drawn, _ = buffer.draw(batch_size - n_uni, rng)
        x[~from_uniform] = drawn
    return x, from_uniform


def langevin_step(x, net, cfg, rng, labels=None, center=None, step_index=0):
    """One sampling step; see the module docstring for the update rule.

    center is the reference state for the eps_box projection (defaults to
    x itself, so a standalone call cannot drift out of the box either).
    """
    x = np.asarray(x, dtype=np.float64)
    g = net.grad_x(x, labels)
    if not np.all(np.isfinite(g)):
        raise ChainDivergedError("energy gradient is not finite", step_index)
    g = np.clip(g, -cfg.grad_clip, cfg.grad_clip)
    new = x - cfg.step_size * g
    if cfg.noise > 0:
        new = new + cfg.noise * rng.normal(size=x.shape)
    if cfg.eps_box is not None:
        ref = x if center is None else center
        new = np.clip(new, ref - cfg.eps_box, ref + cfg.eps_box)
    if cfg.clamp is not None:
        new = np.clip(new, cfg.clamp[0], cfg.clamp[1])
    if cfg.mask is not None:
        if cfg.mask.shape != (x.shape[1],):
            raise DimensionError(
                f"mask shape {cfg.mask.shape} does not match dimension {x.shape[1]}")
        new = np.where(cfg.mask, new, x)
    return new


def run_chain(init, net, cfg, rng, labels=None, trace=True):
    """Apply cfg.steps Langevin steps from init.

    Returns (final state, energy trace). The trace holds the energy of
    every visited state including the initial one, shape (steps+1, batch);
    pass trace=False to skip those extra forward passes and get None.
    """
    x = np.array(init, dtype=np.float64, copy=True)
    center = x.copy() if cfg.eps_box is not None else None
    energies = None
    if trace:
        energies = np.empty((cfg.steps + 1, x.shape[0]))
        energies[0] = net.energy(x, labels)
    for k in range(cfg.steps):
        x = langevin_step(x, net, cfg, rng, labels=labels, center=center,
                          step_index=k)
        if trace:
            energies[k + 1] = net.energy(x, labels)
    return x, energies


def inpaint(x_corrupt, mask, net, cfg, rng, labels=None):
    """Restore the masked (unknown) components of x_corrupt by sampling.

    mask marks the unknown components; everything else is preserved
    bit-exactly. Returns the restored batch.
    """
    cfg = replace(cfg, mask=np.asarray(mask, dtype=bool))
    restored, _ = run_chain(x_corrupt, net, cfg, rng, labels=labels, trace=False)
    return restored


def refine_bounded(x0, eps_box, net, cfg, rng, labels=None):
    """Sample while staying within an L-infinity ball of radius eps_box
    around x0. Returns the refined batch."""
    cfg = replace(cfg, eps_box=float(eps_box))
    refined, _ = run_chain(x0, net, cfg, rng, labels=labels, trace=False)
    return refined
