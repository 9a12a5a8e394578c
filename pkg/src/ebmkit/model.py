"""Fully-connected energy networks.

An EnergyNet maps a batch of points (rows of x) to one real energy per
row. Hidden layers are affine + activation, optionally followed by a
per-class gain and bias (h <- gamma_y * h + beta_y) when the model is
conditional; the final layer is a plain affine map to width 1.

Spectral normalization divides each weight matrix by its estimated top
singular value. The estimate comes from a stored left-vector u updated by
power iteration; the right vector v and the scale sigma = u^T W v are
derived from (W, u) at use time rather than cached, so a checkpoint that
stores only (W, b, gamma, beta, u) reproduces forward passes bit-exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, LabelError

ACTIVATIONS = ("swish", "leaky_relu")

LEAKY_SLOPE = 0.2

# sup |d swish / dx| is ~1.0998 (attained near x = 2.4); 1.1 is a safe
# per-layer slope bound for Lipschitz bookkeeping.
SWISH_SLOPE_BOUND = 1.1


def activation_slope_bound(kind):
    if kind == "swish":
        return SWISH_SLOPE_BOUND
    if kind == "leaky_relu":
        return 1.0
    raise ConfigError(f"unsupported activation {kind!r}")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(z, kind):
    if kind == "swish":
        return z * _sigmoid(z)
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _act_deriv(z, kind):
    if kind == "swish":
        s = _sigmoid(z)
        return s + z * s * (1.0 - s)
    return np.where(z > 0, 1.0, LEAKY_SLOPE)


@dataclass
class ModelConfig:
    """Architecture description.

    widths runs input dimension first through hidden widths to a final
    width of 1 (the scalar energy head).
    """

    widths: tuple
    activation: str = "swish"
    num_classes: int = 0
    spectral_norm: bool = True
    power_iters: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ConfigError("widths needs an input extent and an output extent")
        if self.widths[-1] != 1:
            raise ConfigError("last layer width must be 1 (scalar energy)")
        if any(w < 1 for w in self.widths):
            raise ConfigError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")
        if self.power_iters < 1:
            raise ConfigError("power_iters must be >= 1")

    @property
    def input_dim(self):
        return self.widths[0]


@dataclass
class Layer:
    w: np.ndarray
    b: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    u: np.ndarray | None = None


class EnergyNet:
    def __init__(self, config, layers):
        self.config = config
        self.layers = layers

    @classmethod
    def init(cls, config, rng):
        """Random fresh model; spectral u estimates are warmed up with 50
        power iterations so the first forward pass is already normalized."""
        layers = []
        n_layers = len(config.widths) - 1
        for i in range(n_layers):
            fan_in, fan_out = config.widths[i], config.widths[i + 1]
            w = rng.normal(size=(fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            b = np.zeros(fan_out)
            gamma = beta = None
            if config.num_classes > 0 and i < n_layers - 1:
                gamma = np.ones((config.num_classes, fan_out))
                beta = np.zeros((config.num_classes, fan_out))
            u = None
            if config.spectral_norm:
                u = rng.normal(size=fan_in)
                u /= np.linalg.norm(u)
            layers.append(Layer(w=w, b=b, gamma=gamma, beta=beta, u=u))
        net = cls(config, layers)
        if config.spectral_norm:
            net.spectral_update(iters=50)
        return net

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        """(name, array) pairs in a fixed order; arrays are live references."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"layer{i}.w", layer.w))
            out.append((f"layer{i}.b", layer.b))
            if layer.gamma is not None:
                out.append((f"layer{i}.gamma", layer.gamma))
                out.append((f"layer{i}.beta", layer.beta))
        return out

    def clone(self):
        layers = [
            Layer(
                w=l.w.copy(),
                b=l.b.copy(),
                gamma=None if l.gamma is None else l.gamma.copy(),
                beta=None if l.beta is None else l.beta.copy(),
                u=None if l.u is None else l.u.copy(),
            )
            for l in self.layers
        ]
        return EnergyNet(self.config, layers)

    # -- spectral normalization ---------------------------------------------

    def spectral_update(self, iters=None):
        """Refine each layer's left-vector estimate by power iteration on
        the Gram matrix W W^T. A zero weight matrix is skipped (its scale
        is undefined) with a warning."""
        if not self.config.spectral_norm:
            raise ConfigError("spectral normalization is disabled for this model")
        steps = self.config.power_iters if iters is None else int(iters)
        for i, layer in enumerate(self.layers):
            u = layer.u
            for _ in range(steps):
                wu = layer.w.T @ u
                n = np.linalg.norm(wu)
                if n == 0.0:
                    warnings.warn(f"layer {i}: zero weight matrix, spectral scale skipped")
                    break
                wv = layer.w @ (wu / n)
                n2 = np.linalg.norm(wv)
                if n2 == 0.0:
                    warnings.warn(f"layer {i}: zero weight matrix, spectral scale skipped")
                    break
                u = wv / n2
            layer.u = u

    def estimated_sigma(self, layer_index):
        """Current top-singular-value estimate ||W^T u|| for one layer."""
        if not self.config.spectral_norm:
            raise ConfigError("spectral normalization is disabled for this model")
        layer = self.layers[layer_index]
        return float(np.linalg.norm(layer.w.T @ layer.u))

    def _effective_weight(self, layer):
        if not self.config.spectral_norm or layer.u is None:
            return layer.w
        sigma = np.linalg.norm(layer.w.T @ layer.u)
        if sigma == 0.0:
            warnings.warn("zero weight matrix, spectral scale skipped")
            return layer.w
        return layer.w / sigma

    # -- validation ----------------------------------------------------------

    def _check_inputs(self, x, labels):
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise DimensionError(
                f"expected inputs of shape (batch, {self.config.input_dim}), got {x.shape}")
        if self.config.num_classes == 0:
            if labels is not None:
                raise LabelError("model is unconditional but labels were given")
            return None
        if labels is None:
            raise LabelError("conditional model requires a label per row")
        labels = np.asarray(labels, dtype=np.intp)
        if labels.shape != (x.shape[0],):
            raise LabelError(f"labels shape {labels.shape} does not match batch {x.shape[0]}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.config.num_classes):
            raise LabelError("label out of range")
        return labels

    # -- fast numpy forward/backward ------------------------------------------

    def energy(self, x, labels=None):
        """Energy per batch row, shape (batch,)."""
        x = np.asarray(x, dtype=np.float64)
        labels = self._check_inputs(x, labels)
        h = x
        for i, layer in enumerate(self.layers[:-1]):
            z = h @ self._effective_weight(layer) + layer.b
            h = _act(z, self.config.activation)
            if layer.gamma is not None:
                h = h * layer.gamma[labels] + layer.beta[labels]
        last = self.layers[-1]
        out = h @ self._effective_weight(last) + last.b
        return out[:, 0]

    def grad_x(self, x, labels=None):
        """d energy[i] / d x[i], shape (batch, d). Rows are independent."""
        x = np.asarray(x, dtype=np.float64)
        labels = self._check_inputs(x, labels)
        w_effs = [self._effective_weight(l) for l in self.layers]
        pre = []
        h = x
        for i, layer in enumerate(self.layers[:-1]):
            z = h @ w_effs[i] + layer.b
            pre.append(z)
            h = _act(z, self.config.activation)
            if layer.gamma is not None:
                h = h * layer.gamma[labels] + layer.beta[labels]
        g = np.repeat(w_effs[-1].T, x.shape[0], axis=0)
        for i in range(len(self.layers) - 2, -1, -1):
            layer = self.layers[i]
            if layer.gamma is not None:
                g = g * layer.gamma[labels]
            g = g * _act_deriv(pre[i], self.config.activation)
            g = g @ w_effs[i].T
        return g

    # -- taped forward ---------------------------------------------------------

    def lift_parameters(self, tape):
        """Create tape leaves (marked as parameters) mirroring the layers.

        Returns a per-layer list of dicts keyed w/b/gamma/beta, in the same
        order as parameters()."""
        lifted = []
        for layer in self.layers:
            entry = {
                "w": tape.leaf(layer.w, param=True),
                "b": tape.leaf(layer.b, param=True),
            }
            if layer.gamma is not None:
                entry["gamma"] = tape.leaf(layer.gamma, param=True)
                entry["beta"] = tape.leaf(layer.beta, param=True)
            lifted.append(entry)
        return lifted

    def taped_energy(self, x, labels=None, params=None):
        """Forward pass built from recorded operations.

        x is a Tensor (leaf or intermediate). When params is None the
        current weights enter as constants so only x is differentiated;
        pass the structure from lift_parameters() to differentiate the
        parameters as well. The spectral scale is u^T W v with u, v fixed
        at their current estimates, so gradients flow through W only.
        """
        xv = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
        labels = self._check_inputs(xv, labels)
        h = x if isinstance(x, ad.Tensor) else ad.constant(xv)
        for i, layer in enumerate(self.layers):
            entry = params[i] if params is not None else None
            w_t = entry["w"] if entry else ad.constant(layer.w)
            b_t = entry["b"] if entry else ad.constant(layer.b)
            w_eff = self._taped_effective_weight(layer, w_t)
            h = ad.add_row(ad.matmul(h, w_eff), b_t)
            if i < len(self.layers) - 1:
                h = ad.activation(h, self.config.activation)
                if layer.gamma is not None:
                    g_t = entry["gamma"] if entry else ad.constant(layer.gamma)
                    be_t = entry["beta"] if entry else ad.constant(layer.beta)
                    h = ad.add(ad.mul(h, ad.take_rows(g_t, labels)),
                               ad.take_rows(be_t, labels))
        return ad.reshape(h, (xv.shape[0],))

    def _taped_effective_weight(self, layer, w_t):
        if not self.config.spectral_norm or layer.u is None:
            return w_t
        wu = layer.w.T @ layer.u
        n = np.linalg.norm(wu)
        if n == 0.0:
            warnings.warn("zero weight matrix, spectral scale skipped")
            return w_t
        v = wu / n
        sigma = ad.sum_all(ad.mul(w_t, ad.constant(np.outer(layer.u, v))))
        return ad.mul_scalar(w_t, ad.reciprocal(sigma))
