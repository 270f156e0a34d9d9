"""Width growth of conv layers driven by the selected fraction of filters.

Every ``period`` epochs each growable conv layer is checked; when the
fraction of its filters with nonzero Gamma exceeds ``threshold`` new filters
are appended.  Only top-level conv layers whose output feeds (through
activations, pooling or a flatten) a single dense or conv layer can grow.
"""
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ArgumentError
from .network import bias_key, weight_key
from .optimizer import LayerState
from .training import dessilbi_epoch

RULES = ("double", "fixed")
PASS_THROUGH = ("activation", "maxpool", "avgpool")


@dataclass(frozen=True)
class GrowthPolicy:
    period: int = 10
    threshold: float = 0.8
    rule: str = "double"
    increment: int = 4
    max_width: int = 64
    post_epochs: int = 30
    rate_factor: float = 0.1
    loss_tol: float = 1e-3

    def __post_init__(self):
        if self.period < 1:
            raise ArgumentError("growth period must be >= 1")
        if not 0 < self.threshold <= 1:
            raise ArgumentError("growth threshold must lie in (0, 1]")
        if self.rule not in RULES:
            raise ArgumentError(f"unknown growth rule {self.rule!r}")
        if self.increment < 1 or self.max_width < 1 or self.post_epochs < 0:
            raise ArgumentError("increment and max_width must be >= 1, post_epochs >= 0")
        if not self.rate_factor > 0:
            raise ArgumentError("rate_factor must be positive")

    def target_width(self, width):
        want = 2 * width if self.rule == "double" else width + self.increment
        return min(want, self.max_width), want > self.max_width

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GrowEvent:
    epoch: int
    layer: str
    old_width: int
    new_width: int
    capped: bool = False

    def to_dict(self):
        return asdict(self)


def layer_ratio(state, key):
    """Fraction of the layer's groups with nonzero Gamma."""
    if key not in state.layers:
        raise ArgumentError(f"{key} is not a penalized layer")
    s = state.layers[key]
    n = s.grouping.n_groups
    return float(np.count_nonzero(s.grouping.norms(s.Gamma))) / n if n else 0.0


def consumer_of(net, index):
    """Index of the layer consuming conv layer ``index``'s channels, or None."""
    layers = net.layers
    for j in range(index + 1, len(layers)):
        kind = layers[j].kind
        if kind in PASS_THROUGH:
            continue
        if kind == "flatten":
            for m in range(j + 1, len(layers)):
                if layers[m].kind == "dense":
                    return m
                if layers[m].kind != "activation":
                    return None
            return None
        if kind in ("conv2d", "dense"):
            return j if kind == "conv2d" else None
        return None
    return None


def growable_layers(net):
    return [str(i) for i, layer in enumerate(net.layers)
            if layer.kind == "conv2d" and consumer_of(net, i) is not None]


def _grow_coupled(s, axis, new_block):
    """Append ``new_block`` to W along ``axis``; V, Gamma, buffers get zeros."""
    def zeros():
        return np.zeros_like(new_block)

    return LayerState(
        W=np.concatenate([s.W, new_block], axis=axis),
        V=np.concatenate([s.V, zeros()], axis=axis),
        Gamma=np.concatenate([s.Gamma, zeros()], axis=axis),
        penalty=s.penalty,
        mom=None if s.mom is None else np.concatenate([s.mom, zeros()], axis=axis),
        g=None if s.g is None else np.concatenate([s.g, zeros()], axis=axis),
    )


def _grow_plain(state, key, axis, new_block, plain, plain_mom):
    plain[key] = np.concatenate([state.plain[key], new_block], axis=axis)
    if key in state.plain_mom:
        plain_mom[key] = np.concatenate([state.plain_mom[key], np.zeros_like(new_block)], axis=axis)


def grow_layer(net, state, index, new_width, rng):
    """Widen conv layer ``index`` to ``new_width`` filters and its consumer to match."""
    layer = net.layers[index]
    old = layer.out_channels
    extra = new_width - old
    if extra <= 0:
        raise ArgumentError(f"new width {new_width} must exceed {old}")
    j = consumer_of(net, index)
    if j is None:
        raise ArgumentError(f"layer {index} has no growable consumer")
    layers = dict(state.layers)
    plain, plain_mom = dict(state.plain), dict(state.plain_mom)
    order = list(state.order)

    # new filters: He-normal over the filter's fan-in
    k = layer.kernel_size
    fan = layer.in_channels * k * k
    wk = weight_key(str(index))
    block = rng.standard_normal((extra, layer.in_channels, k, k)) * np.sqrt(2.0 / fan)
    if wk in layers:
        layers[wk] = _grow_coupled(layers[wk], 0, block)
    else:
        _grow_plain(state, wk, 0, block, plain, plain_mom)
    if layer.bias:
        _grow_plain(state, bias_key(str(index)), 0, np.zeros(extra), plain, plain_mom)

    # consumer: append matching input channels
    cons = net.layers[j]
    ck = weight_key(str(j))
    if cons.kind == "conv2d":
        kk = cons.kernel_size
        fan = new_width * kk * kk
        cblock = rng.standard_normal((cons.out_channels, extra, kk, kk)) * np.sqrt(2.0 / fan)
        new_cons = replace(cons, in_channels=new_width)
    else:
        # channels flatten row-major, so the new channels' features come last
        per_channel = cons.in_features // old
        fan = new_width * per_channel
        cblock = rng.standard_normal((cons.out_features, extra * per_channel)) * np.sqrt(2.0 / fan)
        new_cons = replace(cons, in_features=fan)
    if ck in layers:
        layers[ck] = _grow_coupled(layers[ck], 1, cblock)
    else:
        _grow_plain(state, ck, 1, cblock, plain, plain_mom)
    net = net.replace_layers({str(index): replace(layer, out_channels=new_width),
                              str(j): new_cons})
    new_state = type(state)(layers=layers, plain=plain, order=tuple(order), k=state.k,
                            plain_mom=plain_mom)
    return net, new_state


def maybe_grow(net, state, policy, epoch, rng):
    """Grow every growable layer whose selected fraction exceeds the threshold."""
    if epoch % policy.period:
        raise ArgumentError(f"growth checks run every {policy.period} epochs, not at {epoch}")
    events = []
    for path in growable_layers(net):
        key = weight_key(path)
        if key not in state.layers:
            continue
        if layer_ratio(state, key) <= policy.threshold:
            continue
        width = net.layers[int(path)].out_channels
        new_width, capped = policy.target_width(width)
        if new_width <= width:
            events.append(GrowEvent(epoch, path, width, width, capped=True))
            continue
        net, state = grow_layer(net, state, int(path), new_width, rng)
        events.append(GrowEvent(epoch, path, width, new_width, capped=capped))
    return net, state, events


def zero_new_filters(params, events):
    """Copy of ``params`` with the filters (and biases) added by ``events`` zeroed."""
    out = dict(params)
    for ev in events:
        if ev.new_width == ev.old_width:
            continue
        wk, bk = weight_key(ev.layer), bias_key(ev.layer)
        w = out[wk].copy()
        w[ev.old_width:] = 0.0
        out[wk] = w
        if bk in out:
            b = out[bk].copy()
            b[ev.old_width:] = 0.0
            out[bk] = b
    return out


def plateaued(losses, policy):
    """Relative change of the epoch loss over the last ``period`` epochs below tolerance."""
    if len(losses) <= policy.period:
        return False
    a, b = losses[-policy.period - 1], losses[-1]
    return abs(a - b) <= policy.loss_tol * max(abs(a), 1e-300)


def grow_phase(net, state, data, cfg, policy, rng, max_epochs, batch_size,
               on_epoch=None, on_grow=None):
    """Train with periodic growth checks until the loss plateaus or ``max_epochs``.

    ``on_grow(net_before, params_before, net_after, state_after, events)`` is
    called at every epoch where at least one layer grew. Returns
    ``(net, state, events, epochs_run)``.
    """
    losses, all_events = [], []
    epoch = 0
    while epoch < max_epochs:
        state, loss = dessilbi_epoch(net, state, data, cfg, cfg.alpha(epoch), rng, batch_size)
        epoch += 1
        losses.append(loss)
        events = []
        if epoch % policy.period == 0:
            if plateaued(losses, policy):
                if on_epoch is not None:
                    on_epoch(epoch, net, state, loss, events)
                break
            before_net, before_params = net, state.params()
            net, state, events = maybe_grow(net, state, policy, epoch, rng)
            grown = [e for e in events if e.new_width > e.old_width]
            if grown and on_grow is not None:
                on_grow(before_net, before_params, net, state, grown)
            all_events.extend(events)
        if on_epoch is not None:
            on_epoch(epoch, net, state, loss, events)
    return net, state, all_events, epoch


def finalize(net, state, policy, data, cfg, rng, batch_size, start_epoch=0, on_epoch=None):
    """Train ``policy.post_epochs`` more epochs at ``rate_factor`` times the scheduled step."""
    for e in range(policy.post_epochs):
        alpha = cfg.alpha(start_epoch + e) * policy.rate_factor
        state, loss = dessilbi_epoch(net, state, data, cfg, alpha, rng, batch_size)
        if on_epoch is not None:
            on_epoch(start_epoch + e + 1, net, state, loss, [])
    return state
