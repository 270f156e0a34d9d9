"""Masks from the support of Gamma, pruning, and winning-ticket retraining."""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DimensionError, NotFoundError, StructuralError
from .network import NetworkSpec, bias_key, count_macs, weight_key
from .penalty import Grouping
from .training import train_sgd

LEVELS = ("weight", "filter", "layer")
# activations that map 0 to 0, so a zeroed layer stays zero through them
ZERO_PRESERVING = ("tanh", "relu")


@dataclass
class Mask:
    """Binary selection keyed by weight key (``"<path>.weight"``).

    weight level: uint8 tensor shaped like the weight; filter level: uint8
    vector of length c_out; layer level: uint8 scalar keep flag.
    """

    level: str
    masks: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ArgumentError(f"unknown mask level {self.level!r}")
        for key, m in self.masks.items():
            m = np.asarray(m)
            if m.size and not np.all((m == 0) | (m == 1)):
                raise ArgumentError(f"mask {key} has entries outside {{0, 1}}")
            self.masks[key] = m.astype(np.uint8)

    def kept(self):
        return sum(int(m.sum()) for m in self.masks.values())

    def total(self):
        return sum(int(m.size) for m in self.masks.values())

    def density(self):
        t = self.total()
        return self.kept() / t if t else 0.0

    def expand(self, shapes):
        """Weight-level view: one 0/1 tensor per weight, given the weight shapes."""
        out = {}
        for key, m in self.masks.items():
            shape = shapes[key]
            if self.level == "weight":
                out[key] = m
            elif self.level == "filter":
                out[key] = np.broadcast_to(m.reshape((-1,) + (1,) * (len(shape) - 1)), shape)
            else:
                out[key] = np.full(shape, int(m), dtype=np.uint8)
        return out


def _dictify(x):
    return x if isinstance(x, dict) else {"w": x}


def weight_mask(gamma):
    """1 where Gamma is nonzero. Accepts one tensor or a dict of them."""
    return Mask("weight", {k: (np.asarray(g) != 0) for k, g in _dictify(gamma).items()})


def filter_mask(gamma, grouping=None):
    """1 for every filter (slice along axis 0) whose Gamma group is nonzero."""
    masks = {}
    for k, g in _dictify(gamma).items():
        gr = grouping if grouping is not None else Grouping(np.shape(g), "filter")
        if gr.kind != "filter":
            raise DimensionError("filter masks need a per-filter grouping")
        masks[k] = gr.norms(g) > 0
    return Mask("filter", masks)


def layer_mask(gamma):
    """Keep flag per layer: 1 iff any Gamma entry of the layer is nonzero."""
    return Mask("layer", {k: np.uint8(np.any(np.asarray(g) != 0)) for k, g in _dictify(gamma).items()})


def mask_from_state(state, level="weight"):
    gammas = state.gammas()
    if level == "weight":
        return weight_mask(gammas)
    if level == "filter":
        return filter_mask(gammas)
    return layer_mask(gammas)


def apply_mask(params, mask):
    """Zero the masked entries; kept entries are returned bit-identical.

    Filter- and layer-level masks also zero the bias of every dropped
    output unit so dropped channels are exactly zero.
    """
    if not isinstance(params, dict):
        if len(mask.masks) != 1:
            raise ArgumentError("a bare tensor needs a single-entry mask")
        (key,) = mask.masks
        return apply_mask({key: params}, mask)[key]
    out = dict(params)
    shapes = {}
    for key in mask.masks:
        if key not in params:
            raise DimensionError(f"mask refers to missing parameter {key}")
        shapes[key] = params[key].shape
    if mask.level == "filter":
        for key, m in mask.masks.items():
            if m.shape != (shapes[key][0],):
                raise DimensionError(f"filter mask for {key} has {m.size} flags, layer has {shapes[key][0]}")
    elif mask.level == "weight":
        for key, m in mask.masks.items():
            if m.shape != shapes[key]:
                raise DimensionError(f"mask for {key} has shape {m.shape}, weight {shapes[key]}")
    for key, m in mask.expand(shapes).items():
        out[key] = np.where(m.astype(bool), params[key], 0.0)
        if mask.level != "weight":
            bkey = key[: -len(".weight")] + ".bias"
            if bkey in params:
                keep = (np.asarray(mask.masks[key]) if mask.level == "filter"
                        else np.full(params[bkey].shape, int(mask.masks[key]))).astype(bool)
                out[bkey] = np.where(keep, params[bkey], 0.0)
    return out


# layer pruning --------------------------------------------------------------

def _block_is_null(block, path, params, empty):
    """True when the block's output is identically zero under the masked params."""
    last = None
    for j, inner in enumerate(block.inner):
        if inner.has_params:
            last = j
    if last is None:
        return False
    lpath = f"{path}.{last}"
    if weight_key(lpath) not in empty:
        return False
    b = params.get(bias_key(lpath))
    if b is not None and np.any(b != 0):
        return False
    return all(layer.kind == "activation" and layer.activation in ZERO_PRESERVING
               or layer.kind == "flatten" for layer in block.inner[last + 1:])


def prune_layers(net, state, masked=True):
    """Drop residual blocks whose penalized layers all have empty support.

    Returns ``(net, params)`` with the surviving layers renumbered. With
    ``masked`` the surviving penalized weights are multiplied by their
    support mask, so the pruned net reproduces the masked dense net exactly.
    """
    params = state.params()
    if masked:
        params = apply_mask(params, weight_mask(state.gammas()))
    empty = {k for k, s in state.layers.items() if not np.any(s.Gamma)}
    keep_layers, key_map = [], {}
    for i, layer in enumerate(net.layers):
        path = str(i)
        if layer.kind == "residual":
            coupled = [weight_key(f"{path}.{j}") for j, inner in enumerate(layer.inner)
                       if inner.has_params and weight_key(f"{path}.{j}") in state.layers]
            if coupled and all(k in empty for k in coupled):
                if not _block_is_null(layer, path, params, empty):
                    raise StructuralError(
                        f"residual block {path} has empty support but its output is not identically zero")
                continue
        elif layer.has_params and weight_key(path) in empty:
            raise StructuralError(
                f"layer {path} ({layer.kind}) has empty support and cannot be removed without changing shapes")
        new_path = str(len(keep_layers))
        keep_layers.append(layer)
        for key in params:
            head, _, rest = key.partition(".")
            if head == path:
                key_map[key] = f"{new_path}.{rest}"
    new_net = NetworkSpec(tuple(keep_layers), net.input_shape, net.loss)
    new_params = {key_map[k]: v.copy() for k, v in params.items() if k in key_map}
    return new_net, new_params


@dataclass
class PruneReport:
    kept: dict
    sparsity: float
    macs: int
    macs_dense: int

    def to_dict(self):
        return {"kept": self.kept, "sparsity": self.sparsity, "macs": self.macs,
                "macs_dense": self.macs_dense}


def prune_report(net, params, keys=None):
    """Kept/total counts per weight and the fraction of nonzero weights.

    ``keys`` restricts the counts (e.g. to penalized layers); MACs always
    cover the whole network.
    """
    keys = keys if keys is not None else [k for k in params if k.endswith(".weight")]
    kept = {k: [int(np.count_nonzero(params[k])), int(params[k].size)] for k in keys}
    total = sum(t for _, t in kept.values())
    nnz = sum(n for n, _ in kept.values())
    return PruneReport(kept=kept, sparsity=nnz / total if total else 0.0,
                       macs=count_macs(net, params), macs_dense=count_macs(net))


# tickets ------------------------------------------------------------------------

@dataclass
class Ticket:
    epoch: int
    mask: Mask
    params: dict  # weights at the ticket epoch
    degenerate: bool

    @property
    def sparsity(self):
        return self.mask.density()


def extract_ticket(source, epoch, level="weight"):
    """Mask from Gamma at ``epoch`` bundled with the weights of that epoch.

    ``source`` is a mapping epoch -> CoupledState or a run directory holding
    epoch checkpoints.
    """
    if isinstance(source, (str, Path)):
        from .harness.checkpoint import checkpoint_path, load_checkpoint

        path = checkpoint_path(source, epoch)
        if not path.exists():
            raise NotFoundError(f"no checkpoint for epoch {epoch} in {source}")
        state = load_checkpoint(path).state
    else:
        if epoch not in source:
            raise NotFoundError(f"no state recorded for epoch {epoch}")
        state = source[epoch]
    mask = mask_from_state(state, level)
    params = {k: v.copy() for k, v in state.params().items()}
    return Ticket(epoch=epoch, mask=mask, params=params, degenerate=mask.kept() == 0)


def train_masked(net, init_params, mask, cfg, train_cfg, data, rng, on_epoch=None, lr_scale=1.0):
    """Momentum SGD with the mask re-applied after every step."""
    params = apply_mask(init_params, mask)

    def post(p):
        return apply_mask(p, mask)

    return train_sgd(net, params, data, cfg, train_cfg, rng, on_epoch=on_epoch,
                     post_step=post, lr_scale=lr_scale)


def fine_tune(net, params, mask, cfg, train_cfg, data, rng, on_epoch=None):
    """Continue from trained weights under the mask at a tenth of the rate."""
    return train_masked(net, params, mask, cfg, train_cfg, data, rng, on_epoch, lr_scale=0.1)
