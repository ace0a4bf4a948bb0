"""Bilevel architecture search with pruning and a channel-rate schedule,
plus the cross-dataset variant.

In-dataset search: split the data evenly, warm up the network weights,
then alternate architecture steps (search split) with weight steps
(evaluation split); probe per-operation errors each epoch, and every
prune period remove the two lowest-scored operations per edge while
updating the channel sampling rate.

Cross-dataset search: each step adapts the shared weights once per source
domain, updates the shared weights from the mean of the adapted learners'
losses on the target batch, then updates the architecture on the target.
"""

from __future__ import annotations

import json
import pickle
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import estimator
from .autodiff import Tensor, no_grad, softmax_cross_entropy, using_dtype
from .cdc import OperatorRegistry
from .data import Dataset
from .estimator import INTERMEDIATE_NODES, Genotype, discretize
from .optim import Adam, zero_grads
from .supernet import SuperNet

CHECKPOINT_VERSION = 1


@dataclass
class SearchConfig:
    epochs: int = 65
    warmup_epochs: int = 10
    prune_period: int = 20
    batch_size: int = 96
    init_channels: int = 16
    init_sample_rate: float = 0.125
    rate_update: str = "double_sampled"  # or halve_sampled
    num_groups: int = 2
    lam: float = 0.15
    weight_lr: float = 1e-3
    weight_decay: float = 3e-4
    arch_lr: float = 6e-4
    arch_weight_decay: float = 1e-3
    probe_interval: int = 1
    probe_batch: int = 32
    inner_lr: float = 0.01
    samples_per_domain: int = 2000
    registry_names: tuple | None = None
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be < epochs")
        if self.prune_period < 1:
            raise ValueError("prune_period must be >= 1")
        if not 0.0 < self.init_sample_rate <= 1.0:
            raise ValueError("init_sample_rate must be in (0, 1]")
        if self.rate_update not in ("double_sampled", "halve_sampled"):
            raise ValueError(f"unknown rate_update {self.rate_update!r}")

    def fingerprint(self) -> str:
        d = asdict(self)
        if d["registry_names"] is not None:
            d["registry_names"] = list(d["registry_names"])
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


def update_sample_rate(rate: float, policy: str) -> float:
    """Channel sampling rate transition applied at prune epochs."""
    if policy == "double_sampled":
        return min(1.0, rate * 2.0)
    if policy == "halve_sampled":
        return rate / 2.0
    raise ValueError(f"unknown rate_update policy {policy!r}")


def _classification_error(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) != labels).mean())


def _check_two_classes(labels: np.ndarray, what: str) -> None:
    if len(labels) == 0:
        raise ValueError(f"{what} is empty")
    if len(np.unique(labels)) < 2:
        raise ValueError(f"{what} contains a single class")


class EventLog:
    def __init__(self, path=None):
        self.events: list[dict] = []
        self._fh = open(path, "w") if path is not None else None

    def emit(self, **fields) -> None:
        self.events.append(fields)
        if self._fh is not None:
            self._fh.write(json.dumps(fields, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _draw_batch(dataset: Dataset, indices: np.ndarray, rng, batch: int):
    pick = rng.choice(indices, size=min(batch, len(indices)), replace=False)
    return dataset.images[pick], dataset.labels[pick]


def _run_probes(net: SuperNet, dataset: Dataset, rng, batch: int,
                epoch: int, log: EventLog) -> None:
    """Measure per-(edge, op) classification errors on both splits with the
    mixed op replaced by each single alive op (full channels, frozen)."""
    xs, ys = _draw_batch(dataset, dataset.splits["search"], rng, batch)
    xe, ye = _draw_batch(dataset, dataset.splits["eval"], rng, batch)
    ts, te = Tensor(xs), Tensor(xe)
    with no_grad():
        for key in sorted(net.edge_states):
            edge = net.edge_states[key]
            for op_i in edge.alive_indices():
                probe = (*key, int(op_i))
                ls = net.forward(ts, mask_rng=rng, sample_rate=1.0,
                                 training=False, probe=probe)
                le = net.forward(te, mask_rng=rng, sample_rate=1.0,
                                 training=False, probe=probe)
                edge.record_probe(int(op_i),
                                  _classification_error(ls.data, ys),
                                  _classification_error(le.data, ye))
    log.emit(epoch=epoch, phase="probe", split="both", loss=None, acc=None)


def _prune_all(net: SuperNet, lam: float, epoch: int, log: EventLog) -> None:
    for kind in sorted({k for k, _, _ in net.edge_states}):
        for node in INTERMEDIATE_NODES:
            edges = [net.edge_states[(kind, i, node)] for i in range(node)]
            scores = estimator.edge_op_score(edges, lam)
            for edge, h in zip(edges, scores):
                estimator.prune(edge, h)
    alive = {f"{k}:{i}->{j}": int(e.alive.sum())
             for (k, i, j), e in sorted(net.edge_states.items())}
    log.emit(epoch=epoch, phase="prune", split=None, loss=None, acc=None,
             alive=alive)


def _weight_step(net, w_opt, arch_params, x, y, rng, rate):
    zero_grads(net.parameters())
    zero_grads(arch_params)
    logits = net.forward(Tensor(x), mask_rng=rng, sample_rate=rate,
                         training=True)
    loss = softmax_cross_entropy(logits, y)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss during search")
    loss.backward()
    zero_grads(arch_params)
    w_opt.step()
    return float(loss.data), 1.0 - _classification_error(logits.data, y)


def _arch_step(net, a_opt, weight_params, x, y, rng, rate):
    zero_grads(net.parameters())
    zero_grads(a_opt.params)
    logits = net.forward(Tensor(x), mask_rng=rng, sample_rate=rate,
                         training=True)
    loss = softmax_cross_entropy(logits, y)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss during search")
    loss.backward()
    zero_grads(weight_params)
    a_opt.step()
    return float(loss.data), 1.0 - _classification_error(logits.data, y)


@dataclass
class SearchResult:
    genotype: Genotype
    events: list
    curves: dict = field(default_factory=dict)


def _build(config: SearchConfig):
    registry = OperatorRegistry(config.registry_names)
    init_rng = np.random.default_rng([config.seed, 0])
    net = SuperNet(registry, init_rng, init_channels=config.init_channels,
                   num_groups=config.num_groups, lam=config.lam)
    w_opt = Adam(net.parameters(), lr=config.weight_lr,
                 weight_decay=config.weight_decay, allow_missing=True)
    a_opt = Adam(net.arch_parameters(), lr=config.arch_lr,
                 weight_decay=config.arch_weight_decay, allow_missing=True)
    return registry, net, w_opt, a_opt


def _rng_streams(seed: int):
    return {name: np.random.default_rng([seed, i + 1])
            for i, name in enumerate(("data", "mask", "probe"))}


def search(config: SearchConfig, dataset: Dataset, event_log_path=None,
           checkpoint_path=None, resume_from=None) -> SearchResult:
    """In-dataset bilevel search; returns the discretized genotype."""
    with using_dtype(config.dtype):
        return _search(config, dataset, event_log_path, checkpoint_path,
                       resume_from)


def _search(config: SearchConfig, dataset: Dataset, event_log_path,
            checkpoint_path, resume_from) -> SearchResult:
    if "search" not in dataset.splits or "eval" not in dataset.splits:
        from .data import SplitSpec, assign_splits
        assign_splits(dataset, SplitSpec(mode="even_half"), config.seed)
    _check_two_classes(dataset.labels[dataset.splits["search"]],
                       "search split")
    _check_two_classes(dataset.labels[dataset.splits["eval"]], "eval split")

    registry, net, w_opt, a_opt = _build(config)
    rngs = _rng_streams(config.seed)
    rate = config.init_sample_rate
    start_epoch = 1

    if resume_from is not None:
        start_epoch, rate = _load_checkpoint(resume_from, net, w_opt, a_opt,
                                             rngs)
        start_epoch += 1

    log = EventLog(event_log_path)
    curves: dict = {"weight_loss": [], "weight_acc": []}
    arch_params = net.arch_parameters()
    weight_params = net.parameters()
    search_idx = dataset.splits["search"]
    eval_idx = dataset.splits["eval"]

    try:
        for epoch in range(start_epoch, config.epochs + 1):
            epoch_losses, epoch_accs = [], []
            if epoch <= config.warmup_epochs:
                for xs, ys, _ in dataset.batches("eval", config.batch_size,
                                                 rng=rngs["data"]):
                    loss, acc = _weight_step(net, w_opt, arch_params, xs, ys,
                                             rngs["mask"], rate)
                    epoch_losses.append(loss)
                    epoch_accs.append(acc)
                    log.emit(epoch=epoch, phase="weight", split="eval",
                             loss=loss, acc=acc)
            else:
                s_batches = list(dataset.batches("search", config.batch_size,
                                                 rng=rngs["data"]))
                e_batches = list(dataset.batches("eval", config.batch_size,
                                                 rng=rngs["data"]))
                for (xs, ys, _), (xe, ye, _) in zip(s_batches, e_batches):
                    loss_a, acc_a = _arch_step(net, a_opt, weight_params,
                                               xs, ys, rngs["mask"], rate)
                    log.emit(epoch=epoch, phase="arch", split="search",
                             loss=loss_a, acc=acc_a)
                    loss_w, acc_w = _weight_step(net, w_opt, arch_params,
                                                 xe, ye, rngs["mask"], rate)
                    log.emit(epoch=epoch, phase="weight", split="eval",
                             loss=loss_w, acc=acc_w)
                    epoch_losses.append(loss_w)
                    epoch_accs.append(acc_w)
                if (epoch - config.warmup_epochs) % config.probe_interval == 0:
                    _run_probes(net, dataset, rngs["probe"],
                                config.probe_batch, epoch, log)
            if epoch_losses:
                curves["weight_loss"].append(float(np.mean(epoch_losses)))
                curves["weight_acc"].append(float(np.mean(epoch_accs)))

            if epoch >= config.prune_period and epoch % config.prune_period == 0:
                _prune_all(net, config.lam, epoch, log)
                new_rate = update_sample_rate(rate, config.rate_update)
                log.emit(epoch=epoch, phase="rate_update", split=None,
                         loss=None, acc=None, rate_before=rate,
                         rate_after=new_rate)
                rate = new_rate

            if checkpoint_path is not None:
                _save_checkpoint(checkpoint_path, net, w_opt, a_opt, rngs,
                                 epoch, rate)
    finally:
        log.close()

    meta = {"seed": config.seed, "epochs": config.epochs,
            "mode": "in_dataset"}
    genotype = discretize(net.edge_states, registry, lam=config.lam,
                          meta=meta)
    return SearchResult(genotype=genotype, events=log.events, curves=curves)


def cross_dataset_search(config: SearchConfig, datasets: list,
                         event_log_path=None) -> SearchResult:
    """Cross-dataset search over K >= 2 domains (first-order adaptation)."""
    with using_dtype(config.dtype):
        return _cross_dataset_search(config, datasets, event_log_path)


def _cross_dataset_search(config: SearchConfig, datasets: list,
                          event_log_path) -> SearchResult:
    if len(datasets) < 2:
        raise ValueError("cross-dataset search needs at least 2 datasets")
    for ds in datasets:
        _check_two_classes(ds.labels, f"dataset {ds.domain!r}")

    registry, net, w_opt, a_opt = _build(config)
    rngs = _rng_streams(config.seed)
    select_rng = np.random.default_rng([config.seed, 9])
    rate = config.init_sample_rate
    k = len(datasets)
    log = EventLog(event_log_path)
    curves: dict = {"target_loss": []}
    weight_params = net.parameters()
    arch_params = net.arch_parameters()

    def all_indices(ds):
        return ds.splits.get("train", np.arange(len(ds)))

    try:
        for epoch in range(1, config.epochs + 1):
            pools = [select_rng.choice(
                all_indices(ds),
                size=min(config.samples_per_domain, len(all_indices(ds))),
                replace=False) for ds in datasets]
            steps = max(1, min(len(p) for p in pools) // config.batch_size)
            epoch_losses = []
            for _ in range(steps):
                t_idx = int(select_rng.integers(k))
                sources = [i for i in range(k) if i != t_idx]
                xt, yt = _draw_batch(datasets[t_idx], pools[t_idx],
                                     rngs["data"], config.batch_size)

                accum = [None] * len(weight_params)
                target_losses = []
                for s_i in sources:
                    xs, ys = _draw_batch(datasets[s_i], pools[s_i],
                                         rngs["data"], config.batch_size)
                    zero_grads(weight_params)
                    zero_grads(arch_params)
                    logits = net.forward(Tensor(xs), mask_rng=rngs["mask"],
                                         sample_rate=rate, training=True)
                    loss_s = softmax_cross_entropy(logits, ys)
                    loss_s.backward()
                    gs = [None if p.grad is None else p.grad.copy()
                          for p in weight_params]
                    saved = [p.data.copy() for p in weight_params]
                    for p, g in zip(weight_params, gs):
                        if g is not None:
                            p.data = p.data - config.inner_lr * g
                    zero_grads(weight_params)
                    zero_grads(arch_params)
                    logits_t = net.forward(Tensor(xt), mask_rng=rngs["mask"],
                                           sample_rate=rate, training=True)
                    loss_t = softmax_cross_entropy(logits_t, yt)
                    loss_t.backward()
                    for j, p in enumerate(weight_params):
                        if p.grad is not None:
                            accum[j] = (p.grad.copy() if accum[j] is None
                                        else accum[j] + p.grad)
                    for p, s in zip(weight_params, saved):
                        p.data = s
                    target_losses.append(float(loss_t.data))
                    log.emit(epoch=epoch, phase="inner_adapt", split=None,
                             loss=float(loss_s.data), acc=None,
                             source=int(s_i), target=t_idx)

                zero_grads(weight_params)
                zero_grads(arch_params)
                for p, g in zip(weight_params, accum):
                    if g is not None:
                        p.grad = g / (k - 1)
                w_opt.step()
                mean_t = float(np.mean(target_losses))
                epoch_losses.append(mean_t)
                log.emit(epoch=epoch, phase="weight_update", split=None,
                         loss=mean_t, acc=None, target=t_idx)

                loss_a, acc_a = _arch_step(net, a_opt, weight_params, xt, yt,
                                           rngs["mask"], rate)
                log.emit(epoch=epoch, phase="arch_update", split=None,
                         loss=loss_a, acc=acc_a, target=t_idx)

            curves["target_loss"].append(float(np.mean(epoch_losses)))

            if epoch % config.probe_interval == 0:
                _run_cross_probes(net, datasets, select_rng, rngs["probe"],
                                  config.probe_batch, epoch, log)
            if epoch >= config.prune_period and epoch % config.prune_period == 0:
                _prune_all(net, config.lam, epoch, log)
                rate = update_sample_rate(rate, config.rate_update)
    finally:
        log.close()

    meta = {"seed": config.seed, "epochs": config.epochs, "mode": "cross"}
    genotype = discretize(net.edge_states, registry, lam=config.lam,
                          meta=meta)
    return SearchResult(genotype=genotype, events=log.events, curves=curves)


def _run_cross_probes(net, datasets, select_rng, probe_rng, batch, epoch,
                      log) -> None:
    """Probe errors: search-stage error from one domain, estimation error
    from a different held-out domain."""
    k = len(datasets)
    si = int(select_rng.integers(k))
    ti = int(select_rng.integers(k - 1))
    if ti >= si:
        ti += 1
    xs, ys = _draw_batch(datasets[si], np.arange(len(datasets[si])),
                         probe_rng, batch)
    xe, ye = _draw_batch(datasets[ti], np.arange(len(datasets[ti])),
                         probe_rng, batch)
    ts, te = Tensor(xs), Tensor(xe)
    with no_grad():
        for key in sorted(net.edge_states):
            edge = net.edge_states[key]
            for op_i in edge.alive_indices():
                probe = (*key, int(op_i))
                ls = net.forward(ts, mask_rng=probe_rng, sample_rate=1.0,
                                 training=False, probe=probe)
                le = net.forward(te, mask_rng=probe_rng, sample_rate=1.0,
                                 training=False, probe=probe)
                edge.record_probe(int(op_i),
                                  _classification_error(ls.data, ys),
                                  _classification_error(le.data, ye))
    log.emit(epoch=epoch, phase="probe", split="cross", loss=None, acc=None)


# -- checkpointing -----------------------------------------------------------


def _edge_state_blob(net: SuperNet) -> dict:
    return {key: {"alpha": e.alpha.data.copy(), "beta": e.beta.data.copy(),
                  "alive": e.alive.copy(),
                  "windows": [list(w) for w in e.windows]}
            for key, e in net.edge_states.items()}


def _save_checkpoint(path, net, w_opt, a_opt, rngs, epoch, rate) -> None:
    blob = {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "rate": rate,
        "weights": [p.data.copy() for p in net.parameters()],
        "bn_stats": _bn_stats(net),
        "edge_states": _edge_state_blob(net),
        "w_opt": w_opt.state(),
        "a_opt": a_opt.state(),
        "rngs": {k: g.bit_generator.state for k, g in rngs.items()},
    }
    with open(path, "wb") as fh:
        pickle.dump(blob, fh)


def _bn_stats(net) -> list:
    from .layers import walk_batchnorms
    stats = []
    walk_batchnorms(net, lambda bn: stats.append((bn.running_mean.copy(),
                                                  bn.running_var.copy())))
    return stats


def _restore_bn(bn, stats) -> None:
    bn.running_mean[...] = stats[0]
    bn.running_var[...] = stats[1]


def _load_checkpoint(path, net, w_opt, a_opt, rngs):
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version "
                         f"{blob.get('version')!r}")
    for p, d in zip(net.parameters(), blob["weights"]):
        p.data[...] = d
    from .layers import walk_batchnorms
    stats = iter(blob["bn_stats"])
    walk_batchnorms(net, lambda bn: _restore_bn(bn, next(stats)))
    for key, e in net.edge_states.items():
        s = blob["edge_states"][key]
        e.alpha.data[...] = s["alpha"]
        e.beta.data[...] = s["beta"]
        e.alive[...] = s["alive"]
        for w, saved in zip(e.windows, s["windows"]):
            w.clear()
            w.extend(saved)
    w_opt.load_state(blob["w_opt"])
    a_opt.load_state(blob["a_opt"])
    for k, g in rngs.items():
        g.bit_generator.state = blob["rngs"][k]
    return blob["epoch"], blob["rate"]
