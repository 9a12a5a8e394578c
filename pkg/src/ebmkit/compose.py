"""Product-of-experts composition of energy models.

A product of component densities is realized by summing their energies.
Components enter as (net, label) pairs: the label (None for unconditional
nets) is baked in, so the summed model is itself unconditional. Joint
sampling runs Langevin dynamics on the sum, either with simultaneous
summed-gradient steps (default) or one component per step in round-robin;
the two agree in the small-step limit.

Fine-tuning treats the frozen sum as the target landscape and adjusts
trainable copies so that short sampling chains land in its low-energy
regions, which is what makes unseen label combinations sampleable.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, LabelError
from .sampler import langevin_step, run_chain
from .trainer import AdamState, kl_finetune_step


@dataclass(frozen=True)
class _SummedConfig:
    input_dim: int
    spectral_norm: bool
    num_classes: int = 0


def _part_dim(net):
    config = getattr(net, "config", None)
    if config is not None:
        return int(config.input_dim)
    return int(net.dim)


def _part_classes(net):
    config = getattr(net, "config", None)
    if config is None:
        return 0
    return int(getattr(config, "num_classes", 0))


class SummedEnergy:
    """Virtual energy function E(x) = sum_i E_i(x, y_i)."""

    def __init__(self, parts):
        if not parts:
            raise ConfigError("need at least one component model")
        self.parts = [(net, label) for net, label in parts]
        dims = {_part_dim(net) for net, _ in self.parts}
        if len(dims) != 1:
            raise DimensionError(
                f"components disagree on input dimension: {sorted(dims)}")
        for net, label in self.parts:
            classes = _part_classes(net)
            if classes == 0 and label is not None:
                raise LabelError("unconditional component given a label")
            if classes > 0:
                if label is None:
                    raise LabelError("conditional component needs a label")
                if not 0 <= int(label) < classes:
                    raise LabelError(f"label {label} out of range 0..{classes - 1}")
        self.config = _SummedConfig(
            input_dim=dims.pop(),
            spectral_norm=any(
                getattr(getattr(net, "config", None), "spectral_norm", False)
                for net, _ in self.parts))

    def _labels_for(self, label, n):
        if label is None:
            return None
        return np.full(n, int(label), dtype=np.intp)

    def energy(self, x, labels=None):
        if labels is not None:
            raise LabelError("component labels are fixed at composition time")
        x = np.asarray(x, dtype=np.float64)
        total = np.zeros(x.shape[0])
        for net, label in self.parts:
            total = total + net.energy(x, self._labels_for(label, x.shape[0]))
        return total

    def grad_x(self, x, labels=None):
        if labels is not None:
            raise LabelError("component labels are fixed at composition time")
        x = np.asarray(x, dtype=np.float64)
        total = np.zeros_like(x)
        for net, label in self.parts:
            total = total + net.grad_x(x, self._labels_for(label, x.shape[0]))
        return total

    # -- trainable-model plumbing (EnergyNet components only) ----------------

    def parameters(self):
        out = []
        for i, (net, _) in enumerate(self.parts):
            for name, arr in net.parameters():
                out.append((f"part{i}.{name}", arr))
        return out

    def clone(self):
        return SummedEnergy([(net.clone(), label) for net, label in self.parts])

    def spectral_update(self, iters=None):
        for net, _ in self.parts:
            if getattr(getattr(net, "config", None), "spectral_norm", False):
                net.spectral_update(iters=iters)

    def lift_parameters(self, tape):
        lifted = []
        for net, _ in self.parts:
            lifted.extend(net.lift_parameters(tape))
        return lifted

    def taped_energy(self, x, labels=None, params=None):
        if labels is not None:
            raise LabelError("component labels are fixed at composition time")
        xv = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
        total = None
        offset = 0
        for net, label in self.parts:
            width = len(net.layers)
            sub = None if params is None else params[offset:offset + width]
            offset += width
            e = net.taped_energy(x, self._labels_for(label, xv.shape[0]),
                                 params=sub)
            total = e if total is None else ad.add(total, e)
        return total


def sum_energy(models):
    """Compose (net, label) pairs into a single summed energy model."""
    return SummedEnergy(models)


def joint_sample(models, cfg, rng, init=None, n=64, sequential=False):
    """Sample the product distribution by Langevin dynamics on the sum.

    models may be a SummedEnergy or a list of (net, label) pairs. With
    sequential=True each step follows one component's gradient in
    round-robin instead of the summed gradient; cfg.steps counts single
    steps in both modes.
    """
    summed = models if isinstance(models, SummedEnergy) else sum_energy(models)
    if init is None:
        init = rng.uniform(size=(n, summed.config.input_dim))
    init = np.asarray(init, dtype=np.float64)
    if not sequential:
        samples, _ = run_chain(init, summed, cfg, rng, trace=False)
        return samples
    singles = [sum_energy([part]) for part in summed.parts]
    x = init.copy()
    center = init.copy() if cfg.eps_box is not None else None
    for k in range(cfg.steps):
        x = langevin_step(x, singles[k % len(singles)], cfg, rng,
                          center=center, step_index=k)
    return x


def finetune_combination(models, observed_labels, cfg, rng, epochs=1):
    """Fine-tune component copies so summed-energy sampling reproduces
    the training combinations.

    models is a list of component nets; observed_labels is a list of
    per-component label tuples, one per training dataset slice. Each
    epoch visits every observed combination once, running one
    kl_finetune_step with the frozen original sum as the target
    landscape. cfg.langevin must respect the taped-chain step cap.
    Returns the list of adjusted component nets (zero epochs returns
    unchanged copies).
    """
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    tuned = [net.clone() for net in models]
    for combo in observed_labels:
        if len(combo) != len(models):
            raise LabelError("each combination needs one label per component")
    state = None
    for _ in range(epochs):
        for combo in observed_labels:
            tuned_view = sum_energy(list(zip(tuned, combo)))
            target_view = sum_energy(list(zip(models, combo)))
            if state is None:
                state = AdamState.for_parameters(tuned_view.parameters())
            kl_finetune_step(tuned_view, target_view, cfg, state, rng)
    return tuned
