"""Numerical checks of the convergence theory and regularization-path records.

The traces here are produced by the (W, Gamma, g) form of the naive
iteration so the subgradient g_k is available at every step.  With
P_k = (W_k, Gamma_k) and Q_k = (P_k, g_{k-1}) the Lyapunov value is

    F(Q_k) = alpha * (L(W_k) + ||W_k - Gamma_k||^2 / (2 nu)) + B(Gamma_k, Gamma_{k-1}; g_{k-1})

and the checks are F(Q_k) <= F(Q_{k-1}) - rho ||P_k - P_{k-1}||^2 and
||H_k|| <= rho1 ||Q_k - Q_{k-1}||.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import DTYPE, spectral_norm_sq
from .errors import ArgumentError
from .optimizer import CoupledState, OptimizerConfig, coupled_grads, lbi_reformulated_step
from .penalty import bregman

DESCENT_SLACK = 1e-10
RATIO_SLACK = 1e-8
SKIP_BELOW = 1e-14


def rho(kappa, nu, lip, alpha):
    return 1.0 / kappa - alpha * (lip + 1.0 / nu) / 2.0


def rho1(kappa, nu, lip, alpha):
    return 2.0 / kappa + 1.0 + alpha * (lip + 2.0 / nu)


def _dictify(x):
    return x if isinstance(x, dict) else {"w": x}


def lyapunov(loss, W, gamma, gamma_prev, g_prev, alpha, nu, spec):
    """F = alpha*(loss + ||W - gamma||^2/(2 nu)) + Bregman(gamma, gamma_prev; g_prev).

    Array arguments describe one coupled tensor; dicts (with ``spec`` a dict
    of PenaltySpec) describe several, summed.
    """
    W, gamma, gamma_prev, g_prev = map(_dictify, (W, gamma, gamma_prev, g_prev))
    specs = spec if isinstance(spec, dict) else {k: spec for k in gamma}
    coupling = sum(float(np.sum((W[k] - gamma[k]) ** 2)) for k in gamma) / (2 * nu)
    breg = sum(bregman(gamma[k], gamma_prev[k], g_prev[k], specs[k]) for k in gamma)
    return alpha * (loss + coupling) + breg


@dataclass
class LyapunovSample:
    k: int
    F: float
    loss_bar: float
    bregman_term: float
    p_step_norm_sq: float = 0.0  # ||P_k - P_{k-1}||^2, 0 at k = 0
    h_norm: float = None  # ||H_k||
    q_step_norm: float = None  # ||Q_k - Q_{k-1}||


@dataclass
class DescentReport:
    rho: float
    max_violation: float = 0.0
    first_violation: int = None
    n_violations: int = 0
    lip_source: str = "exact"

    @property
    def passed(self):
        return self.n_violations == 0


@dataclass
class RelativeErrorReport:
    rho1: float
    ratios: list = field(default_factory=list)
    max_ratio: float = 0.0
    first_violation: int = None
    n_violations: int = 0
    skipped: int = 0
    lip_source: str = "exact"

    @property
    def passed(self):
        return self.n_violations == 0


def lyapunov_trace(loss_grad, w0, penalties, cfg, steps, alpha=None):
    """Run ``steps`` full-batch iterations and record F, step sizes and H.

    ``loss_grad(params) -> (loss, grads)`` works on a dict of arrays; a bare
    array ``w0`` is wrapped as ``{"w": w0}`` and ``penalties`` may then be a
    single PenaltySpec. Returns the samples for k = 0..steps.
    """
    if cfg.variant != "naive":
        raise ArgumentError("descent traces are defined for the naive variant")
    alpha = cfg.lr if alpha is None else alpha
    single = not isinstance(w0, dict)
    params = _dictify(np.asarray(w0, dtype=DTYPE) if single else w0)
    if not isinstance(penalties, dict):
        penalties = {k: penalties for k in params}
    if single:
        inner = loss_grad

        def loss_grad(p):
            loss, g = inner(p["w"])
            return loss, {"w": g}

    state = CoupledState.create(params, penalties, track_g=True)
    nu, kappa = cfg.nu, cfg.kappa
    samples = []
    prev = None  # (state, g_prev) at k-1
    g_before = {k: np.zeros_like(s.W) for k, s in state.layers.items()}  # g_{k-1}
    for k in range(steps + 1):
        loss, grads = loss_grad(state.params())
        coupling = state.coupling_loss(nu)
        gam_prev = prev[0].layers if prev else state.layers
        breg = sum(bregman(s.Gamma, gam_prev[key].Gamma, g_before[key], s.penalty)
                   for key, s in state.layers.items())
        sample = LyapunovSample(k=k, F=alpha * (loss + coupling) + breg,
                                loss_bar=loss + coupling, bregman_term=breg)
        if prev:
            old, g_older = prev
            dp = dq = h = 0.0
            for key, s in state.layers.items():
                o = old.layers[key]
                gw, gg = coupled_grads(s, grads[key], nu)
                dp += float(np.sum((s.W - o.W) ** 2) + np.sum((s.Gamma - o.Gamma) ** 2))
                dq += float(np.sum((g_before[key] - g_older[key]) ** 2))
                h += float(np.sum((alpha * gw) ** 2)
                           + np.sum((alpha * gg + s.g - o.g) ** 2)
                           + np.sum((o.Gamma - s.Gamma) ** 2))
            for key, w in state.plain.items():
                dp += float(np.sum((w - old.plain[key]) ** 2))
                h += float(np.sum((alpha * grads[key]) ** 2))
            sample.p_step_norm_sq = dp
            sample.q_step_norm = float(np.sqrt(dp + dq))
            sample.h_norm = float(np.sqrt(h))
        samples.append(sample)
        if k == steps:
            break
        nxt = lbi_reformulated_step(state, grads, cfg, alpha)
        g_older = g_before
        g_before = {key: s.g for key, s in state.layers.items()}
        prev = (state, g_older)
        state = nxt
    return samples


def check_sufficient_descent(trace, rho_value, slack=DESCENT_SLACK, lip_source="exact"):
    report = DescentReport(rho=rho_value, lip_source=lip_source)
    for a, b in zip(trace, trace[1:]):
        excess = b.F - (a.F - rho_value * b.p_step_norm_sq)
        if excess > slack:
            report.n_violations += 1
            if report.first_violation is None:
                report.first_violation = b.k
        report.max_violation = max(report.max_violation, excess)
    return report


def check_relative_error(trace, rho1_value, tol=RATIO_SLACK, skip_below=SKIP_BELOW,
                         lip_source="exact"):
    report = RelativeErrorReport(rho1=rho1_value, lip_source=lip_source)
    for s in trace:
        if s.q_step_norm is None:
            continue
        if s.q_step_norm < skip_below:
            report.skipped += 1
            continue
        r = s.h_norm / s.q_step_norm
        report.ratios.append(r)
        report.max_ratio = max(report.max_ratio, r)
        if r > rho1_value + tol:
            report.n_violations += 1
            if report.first_violation is None:
                report.first_violation = s.k
    return report


def running_mean_step(trace, K):
    """(1/K) * sum of ||P_k - P_{k-1}||^2 over the first K steps."""
    if K < 1 or K >= len(trace):
        raise ArgumentError(f"K must be in [1, {len(trace) - 1}]")
    return sum(s.p_step_norm_sq for s in trace[1:K + 1]) / K


def check_rate(trace, k_short=100, k_long=400):
    """O(1/K) criterion: the running mean at k_long is at most half that at k_short."""
    a, b = running_mean_step(trace, k_short), running_mean_step(trace, k_long)
    return b <= 0.5 * a, a, b


def least_squares_problem(X, y):
    """Loss ||Xw - y||^2/(2n), its gradient, and the exact Lipschitz constant."""
    X = np.asarray(X, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    n = X.shape[0]

    def loss_grad(w):
        r = X @ w - y
        return 0.5 * float(r @ r) / n, X.T @ r / n

    return loss_grad, spectral_norm_sq(X) / n


def estimate_lip(loss_grad, params, rng, n_samples=20, radius=1e-2, safety=2.0):
    """Sampled gradient-difference ratio, inflated by ``safety``."""
    _, g0 = loss_grad(params)
    best = 0.0
    for _ in range(n_samples):
        delta = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        norm = np.sqrt(sum(float(np.sum(d ** 2)) for d in delta.values()))
        delta = {k: d * (radius / norm) for k, d in delta.items()}
        _, g1 = loss_grad({k: params[k] + delta[k] for k in params})
        diff = np.sqrt(sum(float(np.sum((g1[k] - g0[k]) ** 2)) for k in params))
        best = max(best, diff / radius)
    return safety * best


# regularization paths -----------------------------------------------------

GROUP_LIST_LIMIT = 4096


def _summary(norms):
    if norms.size == 0:
        return {"min": 0.0, "mean": 0.0, "max": 0.0}
    return {"min": float(norms.min()), "mean": float(norms.mean()), "max": float(norms.max())}


@dataclass
class PathRecord:
    epoch: int
    loss: float
    metric: float
    layers: dict
    events: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(epoch=d["epoch"], loss=d["loss"], metric=d["metric"],
                   layers=d.get("layers", {}), events=d.get("events", []))


def layer_summary(s, group_limit=GROUP_LIST_LIMIT):
    """Support counts and group-norm summaries of one coupled layer."""
    gr = s.grouping
    gn = gr.norms(s.Gamma)
    wn = gr.norms(s.W)
    out = {
        "supp": int(np.count_nonzero(s.Gamma)),
        "params": int(s.W.size),
        "groups_active": int(np.count_nonzero(gn)),
        "groups": int(gr.n_groups),
        "w_norms": _summary(wn),
        "v_norms": _summary(gr.norms(s.V)),
    }
    if gr.n_groups <= group_limit:
        out["gamma_group_norms"] = gn.tolist()
        out["w_group_norms"] = wn.tolist()
    return out


def path_record(epoch, loss, metric, state, events=(), group_limit=GROUP_LIST_LIMIT):
    layers = {key: layer_summary(s, group_limit) for key, s in state.layers.items()}
    return PathRecord(epoch=epoch, loss=float(loss), metric=float(metric), layers=layers,
                      events=list(events))


def support_entry_times(path):
    """First epoch at which each group of each layer is nonzero, or None."""
    entry = {}
    for rec in path:
        rec = rec if isinstance(rec, PathRecord) else PathRecord.from_dict(rec)
        for key, layer in rec.layers.items():
            norms = layer.get("gamma_group_norms")
            if norms is None:
                raise ArgumentError(f"path for {key} was recorded without per-group norms")
            times = entry.setdefault(key, [None] * len(norms))
            if len(norms) > len(times):  # layer grew
                times.extend([None] * (len(norms) - len(times)))
            for j, v in enumerate(norms):
                if v > 0 and times[j] is None:
                    times[j] = rec.epoch
    return entry
