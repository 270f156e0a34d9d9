"""Experiment drivers behind the CLI subcommands.

Every driver writes into ``cfg.out``: a JSON-lines log (``path.jsonl`` for
the training tasks, ``<task>.jsonl`` otherwise), ``<task>_report.json`` and,
when it trains, ``checkpoints/epoch_NNNN.{json,bin}``.
"""
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..core import make_rng
from ..diagnostics import (check_rate, check_relative_error, check_sufficient_descent, estimate_lip,
                           least_squares_problem, lyapunov_trace, path_record, rho, rho1)
from ..errors import ArgumentError, DessiError, NotFoundError
from ..grow import finalize, grow_phase, zero_new_filters
from ..network import (LayerSpec, NetworkSpec, evaluate, forward, init_params, loss_and_grad,
                       weight_key)
from ..optimizer import CoupledState, init_state, max_step_size
from ..penalty import default_penalty
from ..sparsify import (apply_mask, extract_ticket, fine_tune, mask_from_state, prune_layers,
                        prune_report, train_masked)
from ..training import TrainConfig, dessilbi_epoch, sgd_epoch
from .checkpoint import checkpoint_path, load_checkpoint, save_checkpoint
from .config import config_hash, to_dict
from .data import Dataset, gen_synthetic, load_idx_dataset, shape_for
from .export import export_plot_data
from .log import PathLog, dumps

L = LayerSpec


# networks and data -----------------------------------------------------------

def mlp(n_in, hidden, n_out, activation="relu"):
    return NetworkSpec((L.dense(n_in, hidden), L.act(activation), L.dense(hidden, n_out)),
                       (n_in,), "softmax_ce")


def desk_cnn(width=8, classes=10, side=28):
    """Small two-conv CNN on 1-channel images, downsampled 2x first."""
    s = side // 2 // 2 // 2
    return NetworkSpec((
        L.avgpool(2),
        L.conv(1, width, 3, padding=1), L.act("relu"), L.maxpool(2),
        L.conv(width, width, 3, padding=1), L.act("relu"), L.maxpool(2),
        L.flatten(),
        L.dense(width * s * s, classes),
    ), (1, side, side), "softmax_ce")


def build_network(ncfg, sample_shape, n_out):
    n_in = int(np.prod(sample_shape))
    if ncfg.preset == "linear":
        return NetworkSpec((L.dense(n_in, n_out, bias=False),), (n_in,), "mse")
    if ncfg.preset in ("mlp", "tanh_mlp"):
        act = "relu" if ncfg.preset == "mlp" else "tanh"
        return mlp(n_in, ncfg.hidden, ncfg.classes, act)
    if ncfg.preset == "desk_cnn":
        side = int(round(np.sqrt(n_in)))
        if side * side != n_in:
            raise ArgumentError(f"desk_cnn needs square single-channel images, got {sample_shape}")
        return desk_cnn(ncfg.width, ncfg.classes, side)
    if ncfg.preset == "custom":
        if not ncfg.spec:
            raise ArgumentError("network.preset custom needs network.spec")
        return NetworkSpec.from_dict(ncfg.spec)
    raise ArgumentError(f"unknown network preset {ncfg.preset!r}")


def load_data(cfg):
    """(train, test) datasets; test falls back to train when absent."""
    d = cfg.dataset
    if d.kind == "synthetic":
        X, y, _ = gen_synthetic(d.n, d.d, d.s, d.noise, cfg.seed)
        train = Dataset(X, y[:, None])
        return train, train
    if d.kind == "idx":
        for name in ("train_images", "train_labels"):
            if not getattr(d, name):
                raise ArgumentError(f"dataset.{name} is required for idx data")
        train = load_idx_dataset(d.train_images, d.train_labels)
        if d.limit:
            train = Dataset(train.x[:d.limit], train.y[:d.limit])
        test = train
        if d.test_images and d.test_labels:
            test = load_idx_dataset(d.test_images, d.test_labels)
        return train, test
    raise ArgumentError(f"unknown dataset kind {d.kind!r}")


def prepare(cfg):
    train, test = load_data(cfg)
    n_out = train.y.shape[1] if train.y.ndim == 2 else cfg.network.classes
    net = build_network(cfg.network, train.x.shape[1:], n_out)
    train = Dataset(shape_for(train.x, net.input_shape), train.y)
    test = Dataset(shape_for(test.x, net.input_shape), test.y)
    return net, train, test


# run context -----------------------------------------------------------------

class Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config_hash(cfg)
        name = "path" if cfg.task in ("train", "ticket", "grow") else cfg.task
        self.log = PathLog(self.out / f"{name}.jsonl")
        self.log.write("header", task=cfg.task, seed=cfg.seed, config=to_dict(cfg),
                       config_hash=self.hash)

    def meta(self, epoch, **extra):
        return {"seed": self.cfg.seed, "epoch": epoch, "config_hash": self.hash,
                "task": self.cfg.task, **extra}

    def checkpoint(self, epoch, state, net, masks=None, force=False):
        if force or epoch in self.cfg.checkpoint_epochs:
            save_checkpoint(checkpoint_path(self.out, epoch), state, net, self.meta(epoch),
                            masks=masks, element_type=self.cfg.checkpoint_type)

    def finish(self, summary):
        summary = {"task": self.cfg.task, "seed": self.cfg.seed, "config_hash": self.hash, **summary}
        self.log.write("summary", **summary)
        (self.out / f"{self.cfg.task}_report.json").write_text(dumps(summary) + "\n")
        return summary


def _train_cfg(cfg, epochs=None):
    return TrainConfig(epochs=cfg.epochs if epochs is None else epochs, batch_size=cfg.batch_size)


def _dessilbi_state(cfg, net, params):
    return init_state(net, params, lam=cfg.lam, momentum=cfg.optimizer.uses_momentum)


def train_dense(run, net, train, test, rng, epochs, extra_checkpoints=()):
    """Train with the configured trainer, logging and checkpointing each epoch."""
    cfg = run.cfg
    params = init_params(net, rng)
    if cfg.trainer == "dessilbi":
        state = _dessilbi_state(cfg, net, params)
    else:
        state = CoupledState.create(params, {})
    run.checkpoint(0, state, net, force=True)
    buffers = None
    for epoch in range(epochs):
        alpha = cfg.optimizer.alpha(epoch)
        if cfg.trainer == "dessilbi":
            state, loss = dessilbi_epoch(net, state, train, cfg.optimizer, alpha, rng, cfg.batch_size)
        else:
            p, buffers, loss = sgd_epoch(net, state.params(), buffers, train, alpha,
                                         cfg.optimizer.momentum, cfg.optimizer.weight_decay, rng,
                                         cfg.batch_size)
            state = CoupledState.create(p, {})
        metric = evaluate(net, state.params(), test.x, test.y)
        run.log.epoch(path_record(epoch + 1, loss, metric, state))
        run.checkpoint(epoch + 1, state, net,
                       force=epoch + 1 == epochs or epoch + 1 in extra_checkpoints)
    return state


# tasks -------------------------------------------------------------------------

def task_train(run):
    cfg = run.cfg
    net, train, test = prepare(cfg)
    rng = make_rng(cfg.seed)
    state = train_dense(run, net, train, test, rng, cfg.epochs)
    params = state.params()
    summary = {"epochs": cfg.epochs, "metric": evaluate(net, params, test.x, test.y)}
    if state.layers:
        summary["prune"] = prune_report(net, apply_mask(params, mask_from_state(state)),
                                        list(state.layers)).to_dict()
    return run.finish(summary)


def _latest_checkpoint(out):
    found = sorted((Path(out) / "checkpoints").glob("epoch_*.json"))
    if not found:
        raise NotFoundError(f"no checkpoints under {out}")
    return found[-1]


def task_prune(run):
    cfg = run.cfg
    path = Path(cfg.prune.checkpoint) if cfg.prune.checkpoint else _latest_checkpoint(cfg.out)
    ck = load_checkpoint(path)
    if ck.net is None:
        raise ArgumentError(f"checkpoint {path} does not record its network")
    net, state = ck.net, ck.state
    _, train, test = prepare(replace(cfg, network=replace(cfg.network, preset="custom",
                                                          spec=net.to_dict())))
    mask = mask_from_state(state, cfg.prune.level)
    dense_metric = evaluate(net, state.params(), test.x, test.y)
    masked = apply_mask(state.params(), mask)
    summary = {"checkpoint": str(path), "level": cfg.prune.level,
               "dense_metric": dense_metric,
               "pruned_metric": evaluate(net, masked, test.x, test.y),
               "report": prune_report(net, masked, list(state.layers)).to_dict()}
    if cfg.prune.layers:
        pnet, pparams = prune_layers(net, state)
        summary["layers_before"] = len(net.layers)
        summary["layers_after"] = len(pnet.layers)
        summary["layer_pruned_metric"] = evaluate(pnet, pparams, test.x, test.y)
    if cfg.prune.finetune_epochs:
        rng = make_rng(cfg.seed)
        tuned = fine_tune(net, masked, mask, cfg.optimizer, _train_cfg(cfg, cfg.prune.finetune_epochs),
                          train, rng)
        summary["finetuned_metric"] = evaluate(net, tuned, test.x, test.y)
    save_checkpoint(run.out / "pruned.json", CoupledState.create(masked, {}), net,
                    run.meta(ck.meta.get("epoch", 0)), masks={"prune": mask},
                    element_type=cfg.checkpoint_type)
    return run.finish(summary)


def task_ticket(run):
    cfg = run.cfg
    if cfg.trainer != "dessilbi":
        raise ArgumentError("tickets are read from a DessiLBI run; set trainer: dessilbi")
    t = cfg.ticket.epoch
    if not 0 <= t <= cfg.epochs:
        raise ArgumentError(f"ticket epoch {t} outside 0..{cfg.epochs}")
    net, train, test = prepare(cfg)
    rng = make_rng(cfg.seed)
    state = train_dense(run, net, train, test, rng, cfg.epochs, extra_checkpoints=(t,))
    ticket = extract_ticket(run.out, t, cfg.ticket.level)
    dense_metric = evaluate(net, state.params(), test.x, test.y)

    def on_epoch(epoch, params, loss):
        run.log.write("retrain", epoch=epoch, loss=loss,
                      metric=evaluate(net, params, test.x, test.y))

    trained = train_masked(net, ticket.params, ticket.mask, cfg.optimizer,
                           _train_cfg(cfg, cfg.ticket.retrain_epochs), train, rng, on_epoch)
    return run.finish({"ticket_epoch": t, "level": cfg.ticket.level,
                       "degenerate": ticket.degenerate, "density": ticket.sparsity,
                       "dense_metric": dense_metric,
                       "ticket_metric": evaluate(net, trained, test.x, test.y)})


def task_grow(run):
    cfg = run.cfg
    if cfg.trainer != "dessilbi":
        raise ArgumentError("growth is driven by Gamma; set trainer: dessilbi")
    net, train, test = prepare(cfg)
    rng = make_rng(cfg.seed)
    state = _dessilbi_state(cfg, net, init_params(net, rng))
    run.checkpoint(0, state, net, force=True)
    checks = []

    def on_grow(net0, params0, net1, state1, events):
        probe = test.x[:16]
        before = forward(net0, params0, probe).output
        after = forward(net1, zero_new_filters(state1.params(), events), probe).output
        checks.append(bool(np.array_equal(before, after)))
        for ev in events:
            run.log.write("grow", **ev.to_dict(), zeroed_equal=checks[-1])

    def on_epoch(epoch, net_, state_, loss, events):
        metric = evaluate(net_, state_.params(), test.x, test.y)
        run.log.epoch(path_record(epoch, loss, metric, state_, [e.to_dict() for e in events]))

    net, state, events, ran = grow_phase(net, state, train, cfg.optimizer, cfg.growth, rng,
                                         cfg.epochs, cfg.batch_size, on_epoch, on_grow)
    state = finalize(net, state, cfg.growth, train, cfg.optimizer, rng, cfg.batch_size,
                     start_epoch=ran, on_epoch=on_epoch)
    final_epoch = ran + cfg.growth.post_epochs
    run.checkpoint(final_epoch, state, net, force=True)
    widths = {str(i): layer.out_channels for i, layer in enumerate(net.layers)
              if layer.kind == "conv2d"}
    return run.finish({"growth_epochs": ran, "epochs": final_epoch,
                       "events": [e.to_dict() for e in events], "zeroed_equal": checks,
                       "widths": widths, "metric": evaluate(net, state.params(), test.x, test.y)})


def task_diagnose(run):
    cfg = run.cfg
    dcfg = cfg.optimizer
    if dcfg.variant != "naive":
        raise ArgumentError("diagnostics run on the naive variant")
    if cfg.dataset.kind == "synthetic":
        d = cfg.dataset
        X, y, _ = gen_synthetic(d.n, d.d, d.s, d.noise, cfg.seed)
        loss_grad, lip = least_squares_problem(X, y)
        w0 = make_rng(cfg.seed + 1).standard_normal(d.d) * 0.1
        penalties = default_penalty("dense", cfg.lam)
        source = "exact"
    else:
        net, train, _ = prepare(cfg)
        rng = make_rng(cfg.seed)
        w0 = init_params(net, rng)
        penalties = {weight_key(p): default_penalty(layer.kind, cfg.lam)
                     for p, layer in net.param_layers() if layer.penalize}

        def loss_grad(params):
            return loss_and_grad(net, params, train.x, train.y)

        lip = estimate_lip(loss_grad, w0, rng)
        source = "estimated-Lip"
    alpha = cfg.diagnose.alpha_fraction * max_step_size(dcfg.kappa, dcfg.nu, lip)
    trace = lyapunov_trace(loss_grad, w0, penalties, dcfg, cfg.diagnose.steps, alpha)
    for s in trace:
        run.log.write("diagnostic", k=s.k, F=s.F, loss_bar=s.loss_bar, bregman=s.bregman_term,
                      p_step_norm_sq=s.p_step_norm_sq, h_norm=s.h_norm, q_step_norm=s.q_step_norm)
    r, r1 = rho(dcfg.kappa, dcfg.nu, lip, alpha), rho1(dcfg.kappa, dcfg.nu, lip, alpha)
    desc = check_sufficient_descent(trace, r, lip_source=source)
    rel = check_relative_error(trace, r1, lip_source=source)
    summary = {"lip": lip, "lip_source": source, "alpha": alpha, "rho": r, "rho1": r1,
               "descent": {"passed": desc.passed, "violations": desc.n_violations,
                           "first_violation": desc.first_violation,
                           "max_violation": desc.max_violation},
               "relative_error": {"passed": rel.passed, "violations": rel.n_violations,
                                  "max_ratio": rel.max_ratio, "skipped": rel.skipped}}
    if cfg.diagnose.steps >= 400:
        ok, a, b = check_rate(trace)
        summary["rate"] = {"passed": ok, "mean_100": a, "mean_400": b}
    return run.finish(summary)


def task_export(run):
    cfg = run.cfg
    log = Path(cfg.export.log) if cfg.export.log else run.out / "path.jsonl"
    files = export_plot_data(log, run.out / "plots")
    return run.finish({"files": [str(f) for f in files]})


TASK_FUNCS = {"train": task_train, "prune": task_prune, "ticket": task_ticket,
              "grow": task_grow, "diagnose": task_diagnose, "export": task_export}


def run(cfg):
    """Execute ``cfg.task``; module errors are appended to the log and re-raised."""
    if cfg.task == "prune" and not cfg.prune.checkpoint:
        _latest_checkpoint(cfg.out)  # fail before the log is reset
    r = Run(cfg)
    try:
        return TASK_FUNCS[cfg.task](r)
    except DessiError as exc:
        r.log.write("error", error=type(exc).__name__, message=str(exc))
        raise
    except FloatingPointError as exc:
        r.log.write("error", error="FloatingPointError", message=str(exc))
        raise
