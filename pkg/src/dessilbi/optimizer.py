"""DessiLBI updates, the mirror-descent and SGD baselines, and the step-size bound.

Each penalized weight W is paired with a sparse companion Gamma and a dual
variable V.  The coupling loss is ``L(W) + ||W - Gamma||^2 / (2 nu)``; W
descends on it while V integrates the negative Gamma-gradient and Gamma is
read back from V through the penalty's prox.  Every step function returns a
fresh state and leaves its input untouched.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .core import DTYPE, check_finite
from .errors import ArgumentError, DimensionError
from .penalty import PenaltySpec, default_penalty, prox, recover_subgradient

VARIANTS = ("naive", "momentum", "momentum_wd", "scaled")


@dataclass(frozen=True)
class OptimizerConfig:
    kappa: float = 1.0
    nu: float = 10.0
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_step: int = 30
    milestones: tuple = ()
    variant: str = "naive"
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta_floor: float = 0.01

    def __post_init__(self):
        if not (self.kappa > 0 and self.nu > 0 and self.lr > 0):
            raise ArgumentError("kappa, nu and lr must be positive")
        if self.variant not in VARIANTS:
            raise ArgumentError(f"unknown variant {self.variant!r}")
        if not 0 <= self.momentum < 1:
            raise ArgumentError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or not self.beta_floor > 0:
            raise ArgumentError("weight_decay must be >= 0 and beta_floor > 0")
        if self.lr_step < 1 or not self.lr_decay > 0:
            raise ArgumentError("lr_step must be >= 1 and lr_decay > 0")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    def alpha(self, epoch):
        """Step size in effect during ``epoch`` (0-based); changes only at epoch boundaries."""
        if self.milestones:
            n = sum(1 for m in self.milestones if epoch >= m)
        else:
            n = epoch // self.lr_step
        return self.lr * self.lr_decay ** n

    @property
    def uses_momentum(self):
        return self.variant != "naive"

    def to_dict(self):
        d = dict(self.__dict__)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LayerState:
    W: np.ndarray
    V: np.ndarray
    Gamma: np.ndarray
    penalty: PenaltySpec
    mom: np.ndarray = None
    g: np.ndarray = None

    def __post_init__(self):
        self.grouping = self.penalty.grouping_for(self.W.shape)

    def subgradient(self, kappa):
        if self.g is not None:
            return self.g
        return recover_subgradient(self.V, self.Gamma, kappa)


@dataclass
class CoupledState:
    """Coupled (W, V, Gamma) per penalized weight plus plain parameters.

    ``layers`` and ``plain`` are keyed like a ParamSet; ``order`` keeps the
    ParamSet's key order so :meth:`params` round-trips.
    """

    layers: dict
    plain: dict
    order: tuple
    k: int = 0
    plain_mom: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params, penalties, momentum=False, track_g=False):
        """``penalties`` maps a subset of param keys to PenaltySpec; the rest stay plain."""
        layers, plain, plain_mom = {}, {}, {}
        for key, w in params.items():
            w = np.array(w, dtype=DTYPE)
            if key in penalties:
                z = np.zeros_like(w)
                layers[key] = LayerState(
                    W=w, V=z, Gamma=z.copy(), penalty=penalties[key],
                    mom=z.copy() if momentum else None, g=z.copy() if track_g else None)
            else:
                plain[key] = w
                if momentum:
                    plain_mom[key] = np.zeros_like(w)
        unknown = set(penalties) - set(params)
        if unknown:
            raise ArgumentError(f"penalties for unknown parameters {sorted(unknown)}")
        return cls(layers=layers, plain=plain, order=tuple(params), plain_mom=plain_mom)

    def params(self):
        return {k: (self.layers[k].W if k in self.layers else self.plain[k]) for k in self.order}

    def gammas(self):
        return {k: s.Gamma for k, s in self.layers.items()}

    def coupling_loss(self, nu):
        return sum(float(np.sum((s.W - s.Gamma) ** 2)) for s in self.layers.values()) / (2 * nu)


def init_state(net, params, lam=1.0, penalties=None, momentum=False, track_g=False):
    """State for a network: every penalized dense/conv weight gets its default penalty."""
    from .network import weight_key

    if penalties is None:
        penalties = {weight_key(path): default_penalty(layer.kind, lam)
                     for path, layer in net.param_layers() if layer.penalize}
    return CoupledState.create(params, penalties, momentum=momentum, track_g=track_g)


def _check_grads(state, grads):
    for key in state.order:
        if key not in grads:
            raise DimensionError(f"missing gradient for {key}")
        ref = state.layers[key].W if key in state.layers else state.plain[key]
        if np.shape(grads[key]) != ref.shape:
            raise DimensionError(f"gradient {key}: shape {np.shape(grads[key])} != {ref.shape}")


def coupled_grads(s, grad, nu):
    """(grad_W, grad_Gamma) of the coupled loss at (W, Gamma)."""
    diff = (s.W - s.Gamma) / nu
    return grad + diff, -diff


def _w_update(w, mom, grad_w, step, cfg):
    """Weight move shared by coupled and plain parameters; returns (w, mom)."""
    if cfg.variant == "naive":
        return w - step * grad_w, None
    mom = cfg.momentum * mom + grad_w
    w_new = w - step * mom
    if cfg.weight_decay:
        w_new = w_new - cfg.weight_decay * w
    return w_new, mom


def _plain_update(state, grads, cfg, alpha):
    plain, plain_mom = {}, {}
    step = cfg.kappa * alpha
    for key, w in state.plain.items():
        w_new, m = _w_update(w, state.plain_mom.get(key), grads[key], step, cfg)
        plain[key] = check_finite(w_new, key)
        if m is not None:
            plain_mom[key] = m
    return plain, plain_mom


def _require_alpha(cfg, alpha):
    alpha = cfg.lr if alpha is None else alpha
    if not alpha >= 0:
        raise ArgumentError(f"step size must be non-negative, got {alpha}")
    return alpha


def _ensure_momentum(state, cfg):
    if cfg.variant != "naive":
        for s in state.layers.values():
            if s.mom is None:
                raise ArgumentError("momentum variants need a state created with momentum=True")


def dessilbi_step(state, grads, cfg, alpha=None):
    """One DessiLBI iteration (naive, momentum or momentum-weight-decay, by ``cfg.variant``)."""
    if cfg.variant == "scaled":
        return dessilbi_step_scaled(state, grads, cfg, alpha)
    alpha = _require_alpha(cfg, alpha)
    _check_grads(state, grads)
    _ensure_momentum(state, cfg)
    kappa, step = cfg.kappa, cfg.kappa * alpha
    layers = {}
    for key, s in state.layers.items():
        grad_w, grad_g = coupled_grads(s, grads[key], cfg.nu)
        w, mom = _w_update(s.W, s.mom, grad_w, step, cfg)
        v = s.V - alpha * grad_g
        gamma = kappa * prox(v, s.penalty, s.grouping)
        layers[key] = LayerState(W=check_finite(w, key), V=check_finite(v, key), Gamma=gamma,
                                 penalty=s.penalty, mom=mom)
    plain, plain_mom = _plain_update(state, grads, cfg, alpha)
    return CoupledState(layers, plain, state.order, state.k + 1, plain_mom)


def dessilbi_step_momentum(state, grads, cfg, alpha=None):
    if cfg.variant not in ("momentum", "momentum_wd"):
        raise ArgumentError(f"momentum step called with variant {cfg.variant!r}")
    return dessilbi_step(state, grads, cfg, alpha)


def scale_factors(s, beta_floor):
    """Per-entry (beta, eps) of the magnitude-scaled update for one layer."""
    gr = s.grouping
    wn = gr.norms(s.W)
    n_w = int(np.count_nonzero(wn))
    n_g = int(np.count_nonzero(gr.norms(s.Gamma)))
    ratio = n_g / n_w if n_w else 0.0
    with np.errstate(divide="ignore"):
        inv = np.where(wn > 0, 1.0 / np.where(wn > 0, wn, 1.0), np.inf)
    beta = np.maximum(beta_floor, np.minimum(1.0, inv) * (1.0 - ratio))
    return gr.expand(beta), gr.expand(wn)


def dessilbi_step_scaled(state, grads, cfg, alpha=None):
    """Magnitude-scaled iteration: V moves by alpha*beta*grad, Gamma = kappa*eps*prox(V)."""
    if cfg.variant != "scaled":
        raise ArgumentError(f"scaled step called with variant {cfg.variant!r}")
    alpha = _require_alpha(cfg, alpha)
    _check_grads(state, grads)
    _ensure_momentum(state, cfg)
    kappa, step = cfg.kappa, cfg.kappa * alpha
    layers = {}
    for key, s in state.layers.items():
        grad_w, grad_g = coupled_grads(s, grads[key], cfg.nu)
        beta, eps = scale_factors(s, cfg.beta_floor)
        w, mom = _w_update(s.W, s.mom, grad_w, step, cfg)
        v = s.V - alpha * beta * grad_g
        gamma = kappa * eps * prox(v, s.penalty, s.grouping)
        layers[key] = LayerState(W=check_finite(w, key), V=check_finite(v, key),
                                 Gamma=check_finite(gamma, key), penalty=s.penalty, mom=mom)
    plain, plain_mom = _plain_update(state, grads, cfg, alpha)
    return CoupledState(layers, plain, state.order, state.k + 1, plain_mom)


def lbi_reformulated_step(state, grads, cfg, alpha=None):
    """The same naive iteration written in (W, Gamma, g) with g a subgradient.

    Gamma is obtained from the prox of the kappa-scaled penalty applied to
    ``Gamma + kappa*(g - alpha*grad_Gamma)`` and g is updated from the Gamma
    increment, so V never enters; V is kept as ``Gamma/kappa + g`` only to
    keep the state interchangeable with :func:`dessilbi_step`.
    """
    if cfg.variant != "naive":
        raise ArgumentError("the reformulated iteration is defined for the naive variant")
    alpha = _require_alpha(cfg, alpha)
    _check_grads(state, grads)
    kappa, step = cfg.kappa, cfg.kappa * alpha
    layers = {}
    for key, s in state.layers.items():
        g = s.subgradient(kappa)
        grad_w, grad_g = coupled_grads(s, grads[key], cfg.nu)
        w = s.W - step * grad_w
        scaled = replace(s.penalty, lam=kappa * s.penalty.lam)
        gamma = prox(s.Gamma + kappa * (g - alpha * grad_g), scaled, s.grouping)
        g_new = g - (gamma - s.Gamma + kappa * alpha * grad_g) / kappa
        layers[key] = LayerState(W=check_finite(w, key), V=gamma / kappa + g_new,
                                 Gamma=check_finite(gamma, key), penalty=s.penalty,
                                 g=check_finite(g_new, key))
    plain, plain_mom = _plain_update(state, grads, cfg, alpha)
    return CoupledState(layers, plain, state.order, state.k + 1, plain_mom)


def mda_step(z, w, grads, alpha, spec, kappa=1.0):
    """Mirror descent with the elastic-net mirror: Z -= alpha*grad; W = kappa*prox(Z)."""
    z = np.asarray(z, dtype=DTYPE)
    if np.shape(w) != z.shape or np.shape(grads) != z.shape:
        raise DimensionError("z, w and grads must share a shape")
    z_new = check_finite(z - alpha * np.asarray(grads, dtype=DTYPE), "z")
    return z_new, kappa * prox(z_new, spec)


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, buffers=None):
    """Momentum SGD: buf = momentum*buf + grad; p -= lr*buf + weight_decay*p.

    Returns ``(params, buffers)``; pass ``buffers`` back on the next call.
    """
    new, bufs = {}, {}
    for key, p in params.items():
        g = grads.get(key)
        if g is None or np.shape(g) != np.shape(p):
            raise DimensionError(f"gradient for {key} missing or misshaped")
        if momentum:
            b = momentum * buffers[key] + g if buffers else np.array(g, dtype=DTYPE)
        else:
            b = g
        q = p - lr * b
        if weight_decay:
            q = q - weight_decay * p
        new[key] = check_finite(q, key)
        bufs[key] = b
    return new, bufs


def max_step_size(kappa, nu, lip):
    """Largest admissible constant step: 2 / (kappa * (lip + 1/nu))."""
    if not (kappa > 0 and nu > 0 and lip > 0):
        raise ArgumentError("kappa, nu and lip must all be positive")
    return 2.0 / (kappa * (lip + 1.0 / nu))
