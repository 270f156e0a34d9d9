"""Sparsity penalties: group structure, value, prox, subgradient, Bregman distance.

A penalty is ``lam * sum_g ||x_g||_2`` over a partition of a tensor's
entries. Lasso is the special case where each entry is its own group.
"""
from dataclasses import dataclass

import numpy as np

from .core import DTYPE
from .errors import ArgumentError, ContractError, DimensionError

KINDS = ("lasso", "group_lasso")
GROUPINGS = ("element", "filter")

# groups whose norm is within this of lam are killed (ties go to sparsity)
KILL_TOL = 1e-12
SUBGRAD_TOL = 1e-10
CONSISTENCY_TOL = 1e-8


class Grouping:
    """Partition of a tensor's entries into groups.

    ``element``: one group per entry. ``filter``: one group per slice along
    axis 0 (an output filter of a conv kernel, a row of a dense weight), i.e.
    a contiguous run of ``prod(shape[1:])`` entries in row-major order.
    ``labels``: explicit integer group id per entry, ids ``0..G-1``.
    """

    def __init__(self, shape, kind="element", labels=None):
        self.shape = tuple(int(s) for s in shape)
        self.kind = kind
        self.labels = None
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != self.shape or not np.issubdtype(labels.dtype, np.integer):
                raise DimensionError(f"group labels must be integers of shape {self.shape}")
            ids = np.unique(labels)
            if labels.size and (ids[0] != 0 or ids[-1] != len(ids) - 1):
                raise DimensionError("group ids must be 0..G-1 with no gaps")
            self.kind = "explicit"
            self.labels = labels.ravel()
        elif kind not in GROUPINGS:
            raise ArgumentError(f"unknown grouping {kind!r}")
        if self.kind == "filter" and len(self.shape) < 1:
            raise DimensionError("filter grouping needs at least one axis")

    @property
    def n_groups(self):
        if self.kind == "element":
            return int(np.prod(self.shape))
        if self.kind == "filter":
            return self.shape[0]
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def group_size(self):
        """Entries per group for the regular groupings."""
        if self.kind == "element":
            return 1
        if self.kind == "filter":
            return int(np.prod(self.shape[1:]))
        raise ArgumentError("explicit groupings have no fixed group size")

    def check(self, x):
        if np.shape(x) != self.shape:
            raise DimensionError(f"tensor of shape {np.shape(x)} does not match grouping {self.shape}")

    def norms(self, x):
        """l2 norm of every group."""
        self.check(x)
        x = np.asarray(x, dtype=DTYPE)
        if self.kind == "element":
            return np.abs(x).ravel()
        if self.kind == "filter":
            return np.sqrt(np.sum(x.reshape(self.shape[0], -1) ** 2, axis=1))
        sq = np.bincount(self.labels, weights=x.ravel() ** 2, minlength=self.n_groups)
        return np.sqrt(sq)

    def expand(self, per_group):
        """Broadcast one value per group back to the tensor's shape."""
        per_group = np.asarray(per_group)
        if per_group.shape != (self.n_groups,):
            raise DimensionError(f"expected {self.n_groups} group values, got {per_group.shape}")
        if self.kind == "element":
            return per_group.reshape(self.shape)
        if self.kind == "filter":
            flat = np.repeat(per_group, self.group_size)
            return flat.reshape(self.shape)
        return per_group[self.labels].reshape(self.shape)

    def active(self, x):
        """Boolean flag per group: True when any entry is nonzero."""
        return self.norms(x) > 0


@dataclass(frozen=True)
class PenaltySpec:
    kind: str = "group_lasso"
    lam: float = 1.0
    grouping: str = "filter"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown penalty kind {self.kind!r}")
        if not self.lam >= 0:
            raise ArgumentError(f"lambda must be non-negative, got {self.lam}")
        if self.kind == "lasso":
            object.__setattr__(self, "grouping", "element")
        elif self.grouping not in GROUPINGS:
            raise ArgumentError(f"unknown grouping {self.grouping!r}")

    @classmethod
    def lasso(cls, lam=1.0):
        return cls("lasso", lam, "element")

    @classmethod
    def group_lasso(cls, lam=1.0, grouping="filter"):
        return cls("group_lasso", lam, grouping)

    def grouping_for(self, shape):
        return Grouping(shape, self.grouping)

    def to_dict(self):
        return {"kind": self.kind, "lam": self.lam, "grouping": self.grouping}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "group_lasso"), float(d.get("lam", 1.0)),
                   d.get("grouping", "filter"))


def default_penalty(layer_kind, lam=1.0):
    """Dense weights: per-entry lasso. Conv kernels: per-filter group lasso."""
    if layer_kind == "conv2d":
        return PenaltySpec.group_lasso(lam, "filter")
    return PenaltySpec.lasso(lam)


def _grouping(x, spec, grouping):
    if grouping is None:
        return spec.grouping_for(np.shape(x))
    grouping.check(x)
    return grouping


def omega_value(gamma, spec, grouping=None):
    gr = _grouping(gamma, spec, grouping)
    return float(spec.lam * np.sum(gr.norms(gamma)))


def prox(v, spec, grouping=None):
    """argmin_G 0.5*||G - v||^2 + lam * sum_g ||G_g||."""
    v = np.asarray(v, dtype=DTYPE)
    gr = _grouping(v, spec, grouping)
    lam = spec.lam
    if lam == 0:
        return v.copy()
    if gr.kind == "element":
        keep = np.abs(v) > lam + KILL_TOL
        return np.where(keep, v - lam * np.sign(v), 0.0)
    norms = gr.norms(v)
    keep = norms > lam + KILL_TOL
    shrink = np.zeros_like(norms)
    shrink[keep] = 1.0 - lam / norms[keep]
    return np.where(gr.expand(keep), v * gr.expand(shrink), 0.0)


def recover_subgradient(v, gamma, kappa, spec=None, grouping=None):
    """g = v - gamma/kappa, an element of the penalty's subdifferential at gamma.

    With ``spec`` given, checks that gamma == kappa * prox(v) first.
    """
    if not kappa > 0:
        raise ArgumentError(f"kappa must be positive, got {kappa}")
    v = np.asarray(v, dtype=DTYPE)
    gamma = np.asarray(gamma, dtype=DTYPE)
    if v.shape != gamma.shape:
        raise DimensionError(f"v {v.shape} and gamma {gamma.shape} differ in shape")
    if spec is not None:
        expected = kappa * prox(v, spec, grouping)
        err = np.max(np.abs(expected - gamma), initial=0.0)
        if err > CONSISTENCY_TOL * max(1.0, np.max(np.abs(gamma), initial=0.0)):
            raise ContractError(f"gamma is not kappa*prox(v): max deviation {err:.3e}")
    return v - gamma / kappa


def check_subgradient(g, gamma, spec, grouping=None, tol=SUBGRAD_TOL):
    """Raise ContractError unless ``g`` lies in the subdifferential at ``gamma``."""
    gr = _grouping(gamma, spec, grouping)
    gr.check(g)
    lam = spec.lam
    gnorm = gr.norms(g)
    worst = float(np.max(gnorm - lam, initial=-np.inf))
    # g is usually derived from gamma, so its rounding error scales with |gamma|
    if worst > tol * max(1.0, float(np.max(np.abs(gamma), initial=0.0))):
        raise ContractError(f"subgradient group norm exceeds lambda by {worst:.3e}")
    gamma_norm = gr.norms(gamma)
    act = gamma_norm > 0
    if np.any(act):
        # on active groups the subgradient is pinned to lam * gamma_g / ||gamma_g||
        unit = np.zeros_like(gamma_norm)
        unit[act] = lam / gamma_norm[act]
        dev = gr.norms(np.where(gr.expand(act), g - np.asarray(gamma) * gr.expand(unit), 0.0))
        scale = max(1.0, lam)
        if np.max(dev) > CONSISTENCY_TOL * scale:
            raise ContractError(
                f"subgradient off the active-group direction by {np.max(dev):.3e}")


def bregman(gamma, gamma_ref, g_ref, spec, grouping=None):
    """Omega(gamma) - Omega(gamma_ref) - <g_ref, gamma - gamma_ref>."""
    gamma = np.asarray(gamma, dtype=DTYPE)
    gamma_ref = np.asarray(gamma_ref, dtype=DTYPE)
    g_ref = np.asarray(g_ref, dtype=DTYPE)
    if not gamma.shape == gamma_ref.shape == g_ref.shape:
        raise DimensionError("bregman operands differ in shape")
    gr = _grouping(gamma, spec, grouping)
    check_subgradient(g_ref, gamma_ref, spec, gr)
    return (omega_value(gamma, spec, gr) - omega_value(gamma_ref, spec, gr)
            - float(np.sum(g_ref * (gamma - gamma_ref))))
