"""Cell cascaded pyramid network: the deeper detection net built from a
discovered genotype, its training loop, evaluation, and class-activation
maps.

The network stacks four groups of (normal, normal, reduction) cells with
channel doubling at each reduction. The output of every reduction cell is
tapped, globally pooled, and the four pooled vectors are concatenated into
the classifier head, preserving multiscale evidence. A flag can disable
the first three taps to recover a plain cascade.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics as metrics_mod
from .autodiff import (Tensor, no_grad, softmax, softmax_cross_entropy,
                       using_dtype)
from .cdc import OperatorRegistry, instantiate, parse_kind
from .data import Dataset
from .estimator import Genotype
from .layers import (BatchNorm2d, Conv2d, FactorizedReduce, Linear, Module,
                     ReLUConvBN, walk_batchnorms)
from .optim import SGD, cosine_lr, zero_grads

WEIGHTS_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 48
    input_size: int = 64
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    cosine_decay: bool = True
    hflip: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")


class DiscreteCell(Module):
    """One genotype cell: four nodes, each the sum of two fixed op stacks."""

    def __init__(self, genotype: Genotype, channels: int, c_prev_prev: int,
                 c_prev: int, reduction: bool, reduction_prev: bool, rng,
                 affine: bool = True):
        self.reduction = reduction
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_prev_prev, channels, rng,
                                         affine=affine)
        else:
            self.pre0 = ReLUConvBN(c_prev_prev, channels, 1, rng,
                                   affine=affine)
        self.pre1 = ReLUConvBN(c_prev, channels, 1, rng, affine=affine)
        pairs = genotype.reduction if reduction else genotype.normal
        self.preds = [pred for _, pred in pairs]
        self.stacks = []
        for op_name, pred in pairs:
            stride = 2 if reduction and pred < 2 else 1
            self.stacks.append(instantiate(parse_kind(op_name), channels,
                                           stride, rng, affine=affine))

    def forward(self, s0: Tensor, s1: Tensor, training: bool = False):
        nodes = [self.pre0(s0, training), self.pre1(s1, training)]
        for node_i in range(4):
            a = self.stacks[2 * node_i](nodes[self.preds[2 * node_i]],
                                        training)
            b = self.stacks[2 * node_i + 1](nodes[self.preds[2 * node_i + 1]],
                                            training)
            nodes.append(a + b)
        return ad.concat(nodes[2:], axis=1)


class DetectionNet(Module):
    """Stem -> 4 x (N, N, R) cells -> pooled pyramid taps -> linear head."""

    def __init__(self, genotype: Genotype, rng, init_channels: int = 16,
                 num_groups: int = 4, num_classes: int = 2,
                 pyramid: bool = True):
        genotype.validate()
        registry = OperatorRegistry(genotype.registry_names)
        if genotype.meta.get("registry_fingerprint") not in (
                None, registry.fingerprint()):
            raise ValueError("genotype registry fingerprint mismatch")
        self.genotype = genotype
        self.num_groups = num_groups
        self.pyramid = pyramid
        self.stem_conv = Conv2d(3, init_channels, 3, rng, padding=1)
        self.stem_bn = BatchNorm2d(init_channels)

        pattern = [False, False, True] * num_groups
        self.cells = []
        self.reduction_positions = []
        c_pp = c_p = init_channels
        channels = init_channels
        reduction_prev = False
        tap_channels = []
        for pos, reduction in enumerate(pattern):
            if reduction:
                channels *= 2
            cell = DiscreteCell(genotype, channels, c_pp, c_p, reduction,
                                reduction_prev, rng)
            self.cells.append(cell)
            c_pp, c_p = c_p, channels * 4
            if reduction:
                self.reduction_positions.append(pos)
                tap_channels.append(c_p)
            reduction_prev = reduction
        head_in = sum(tap_channels) if pyramid else tap_channels[-1]
        self.classifier = Linear(head_in, num_classes, rng)

    def forward_with_taps(self, x: Tensor, training: bool = False,
                          tap_mask=None):
        n, c, h, w = x.shape
        factor = 2 ** self.num_groups
        if h % factor or w % factor:
            raise ValueError(f"spatial size {h}x{w} not divisible by {factor}")
        s = self.stem_bn(self.stem_conv(x, training), training)
        s0 = s1 = s
        taps = []
        for pos, cell in enumerate(self.cells):
            s0, s1 = s1, cell.forward(s0, s1, training)
            if pos in self.reduction_positions:
                taps.append(s1)
        pooled = [ad.global_avg_pool(t) for t in taps]
        if tap_mask is not None:
            pooled = [p * float(m) for p, m in zip(pooled, tap_mask)]
        if self.pyramid:
            head_in = ad.concat(pooled, axis=1)
        else:
            head_in = pooled[-1]
        return self.classifier(head_in, training), taps

    def forward(self, x: Tensor, training: bool = False, tap_mask=None):
        logits, _ = self.forward_with_taps(x, training, tap_mask)
        return logits

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def parameters(self):
        out = self.stem_conv.parameters() + self.stem_bn.parameters()
        for cell in self.cells:
            out.extend(cell.parameters())
        out.extend(self.classifier.parameters())
        return out


def build(genotype: Genotype, rng=None, init_channels: int = 16,
          num_groups: int = 4, pyramid: bool = True,
          seed: int = 0) -> DetectionNet:
    if rng is None:
        rng = np.random.default_rng([seed, 100])
    return DetectionNet(genotype, rng, init_channels=init_channels,
                        num_groups=num_groups, pyramid=pyramid)


def _net_dtype(net: DetectionNet):
    return net.parameters()[0].data.dtype


def _scores_for(net: DetectionNet, images: np.ndarray,
                batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad(), using_dtype(_net_dtype(net)):
        for start in range(0, len(images), batch_size):
            logits = net.forward(Tensor(images[start:start + batch_size]),
                                 training=False)
            out.append(softmax(logits, axis=1).data[:, 1])
    return np.concatenate(out)


def evaluate(net: DetectionNet, dataset: Dataset, split: str = "test",
             config_fingerprint: str = "",
             seed: int = 0) -> metrics_mod.MetricsReport:
    idx = dataset.splits[split]
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    scores = _scores_for(net, dataset.images[idx])
    labels = dataset.labels[idx]
    report = metrics_mod.MetricsReport(
        acc=metrics_mod.accuracy(scores, labels),
        auc=metrics_mod.auc(scores, labels),
        n_samples=len(idx),
        config_fingerprint=config_fingerprint,
        seed=seed,
    )
    report.validate()
    return report


def train(net: DetectionNet, dataset: Dataset, config: TrainConfig):
    """SGD training with per-epoch validation; restores the weights of the
    best validation-AUC epoch. Returns the loss/metric curves."""
    with using_dtype(config.dtype):
        for p in net.parameters():
            p.data = p.data.astype(ad.default_dtype(), copy=False)
        return _train(net, dataset, config)


def _train(net: DetectionNet, dataset: Dataset, config: TrainConfig):
    opt = SGD(net.parameters(), lr=config.lr, momentum=config.momentum,
              weight_decay=config.weight_decay)
    data_rng = np.random.default_rng([config.seed, 200])
    aug_rng = np.random.default_rng([config.seed, 201])
    curves = {"train_loss": [], "train_acc": [], "val_auc": [], "lr": []}
    best = {"auc": -1.0, "weights": None, "bn": None}

    for epoch in range(config.epochs):
        if config.cosine_decay:
            opt.lr = cosine_lr(config.lr, epoch, config.epochs)
        losses, accs = [], []
        for xb, yb, _ in dataset.batches("train", config.batch_size,
                                         rng=data_rng):
            if config.hflip:
                flip = aug_rng.random(len(xb)) < 0.5
                xb = xb.copy()
                xb[flip] = xb[flip][:, :, :, ::-1]
            logits = net.forward(Tensor(xb), training=True)
            loss = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"training diverged at epoch {epoch}: loss={loss.data}")
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            accs.append(float((logits.data.argmax(axis=1) == yb).mean()))
        curves["train_loss"].append(float(np.mean(losses)))
        curves["train_acc"].append(float(np.mean(accs)))
        curves["lr"].append(opt.lr)

        val_idx = dataset.splits["val"]
        val_scores = _scores_for(net, dataset.images[val_idx])
        val_auc = metrics_mod.auc(val_scores, dataset.labels[val_idx])
        curves["val_auc"].append(val_auc)
        if val_auc > best["auc"]:
            best["auc"] = val_auc
            best["weights"] = [p.data.copy() for p in net.parameters()]
            best["bn"] = _bn_snapshot(net)

    if best["weights"] is not None:
        for p, d in zip(net.parameters(), best["weights"]):
            p.data[...] = d
        _bn_restore(net, best["bn"])
    return curves


# -- class activation maps ---------------------------------------------------


def _bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + c * wy * (1 - wx) + d * wy * wx)


def activation_map(net: DetectionNet, image: np.ndarray):
    """Gradient-weighted class-activation map from the last reduction
    cell's output, upsampled to the input size.

    Returns (map in [0, 1] with the input's spatial shape, all_zero flag).
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a single (3, H, W) image, got "
                         f"{image.shape}")
    with using_dtype(_net_dtype(net)):
        x = Tensor(image[None])
        logits, taps = net.forward_with_taps(x, training=False)
        tap = taps[-1]
        pred = int(logits.data[0].argmax())
        logits[0, pred].backward(retain_grads=True)
    if tap.grad is None:
        raise RuntimeError("no gradient reached the last reduction cell")
    weights = tap.grad[0].mean(axis=(1, 2))
    zero_grads(net.parameters())
    cam = np.maximum((weights[:, None, None] * tap.data[0]).sum(axis=0), 0.0)
    peak = cam.max()
    all_zero = peak <= 0.0
    if not all_zero:
        cam = (cam - cam.min()) / (peak - cam.min() + 1e-12)
    _, h, w = image.shape
    return _bilinear_resize(cam, h, w), all_zero


def write_pgm(path, arr: np.ndarray) -> None:
    """8-bit binary portable graymap from values in [0, 1]."""
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


# -- weight checkpoints -------------------------------------------------------


def _bn_snapshot(net) -> list:
    stats = []
    walk_batchnorms(net, lambda bn: stats.append((bn.running_mean.copy(),
                                                  bn.running_var.copy())))
    return stats


def _bn_restore(net, stats) -> None:
    it = iter(stats)

    def restore(bn):
        m, v = next(it)
        bn.running_mean[...] = m
        bn.running_var[...] = v

    walk_batchnorms(net, restore)


def save_weights(net: DetectionNet, path) -> None:
    blob = {"version": WEIGHTS_VERSION,
            "genotype": net.genotype.to_json(),
            "weights": [p.data.copy() for p in net.parameters()],
            "bn_stats": _bn_snapshot(net)}
    with open(path, "wb") as fh:
        pickle.dump(blob, fh)


def load_weights(net: DetectionNet, path) -> None:
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    if blob.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version {blob.get('version')!r}")
    if blob["genotype"] != net.genotype.to_json():
        raise ValueError("checkpoint genotype does not match the network")
    for p, d in zip(net.parameters(), blob["weights"]):
        p.data[...] = d
    _bn_restore(net, blob["bn_stats"])
