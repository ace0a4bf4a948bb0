"""Differentiable search network: 7-node cells with mixed operations,
partial channel sampling, and edge normalization.

Architecture state (alpha logits per op, beta logit per edge, alive flags,
probe-error windows) lives in EdgeState objects shared across all cells of
the same kind; operation weights are private to each cell.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import estimator
from .autodiff import Tensor
from .cdc import OperatorRegistry, instantiate
from .estimator import INTERMEDIATE_NODES, EdgeState
from .layers import (BatchNorm2d, Conv2d, FactorizedReduce, Linear, Module,
                     ReLUConvBN)

NUM_INTERMEDIATE = len(INTERMEDIATE_NODES)


def edge_ids():
    """All (src, dst) pairs of the 7-node cell DAG, 14 per cell kind."""
    return [(i, j) for j in INTERMEDIATE_NODES for i in range(j)]


def sample_mask(rng: np.random.Generator, channels: int,
                rate: float) -> np.ndarray:
    """Binary channel mask with popcount max(1, round(rate * channels))."""
    k = max(1, int(round(rate * channels)))
    k = min(k, channels)
    mask = np.zeros(channels)
    mask[rng.choice(channels, size=k, replace=False)] = 1.0
    return mask


def init_edge_states(registry: OperatorRegistry, kinds, rng,
                     noise: float = 1e-3) -> dict:
    """Fresh EdgeStates: near-zero logits with tiny tie-breaking noise."""
    states = {}
    n = len(registry)
    for kind in kinds:
        for i, j in edge_ids():
            states[(kind, i, j)] = EdgeState(
                kind=kind, src=i, dst=j,
                alpha=Tensor(noise * rng.standard_normal(n),
                             requires_grad=True),
                beta=Tensor(noise * rng.standard_normal(()),
                            requires_grad=True),
                alive=np.ones(n, dtype=bool),
            )
    return states


def importance_weights(edge: EdgeState, lam: float) -> Tensor:
    """Differentiable per-alive-op mixing weights: softmax(alpha) + lam*E.

    The generalization score enters as a constant; gradients flow through
    the alpha softmax only. Uniform E is substituted before any probes.
    """
    idx = edge.alive_indices()
    alpha_alive = edge.alpha[idx]
    w = ad.softmax(alpha_alive, axis=-1)
    e = estimator.generalization_score_or_uniform(edge)
    return w + Tensor(lam * e[idx])


class MixedOp(Module):
    """All candidate operation stacks on one edge of one cell."""

    def __init__(self, registry: OperatorRegistry, channels: int, stride: int,
                 rng, affine: bool = False):
        self.stride = stride
        self.channels = channels
        self.stacks = [instantiate(kind, channels, stride, rng, affine=affine)
                       for kind in registry]

    def forward_mixed(self, x: Tensor, edge: EdgeState, mask: np.ndarray,
                      lam: float, training: bool) -> Tensor:
        if edge.n_alive == 0:
            raise RuntimeError("all operations dead on edge "
                               f"({edge.kind}, {edge.src}->{edge.dst})")
        imp = importance_weights(edge, lam)
        m = Tensor(mask.reshape(1, self.channels, 1, 1))
        masked = x * m
        out = None
        for pos, op_i in enumerate(edge.alive_indices()):
            y = self.stacks[op_i](masked, training) * imp[pos]
            out = y if out is None else out + y
        bypass = x * Tensor((1.0 - mask).reshape(1, self.channels, 1, 1))
        if self.stride == 2:
            bypass = ad.avg_pool2d(bypass, 2, 2)
        return out + bypass

    def forward_single(self, x: Tensor, op_index: int,
                       training: bool) -> Tensor:
        """Probe path: one operation at weight 1, full channels, no bypass."""
        return self.stacks[op_index](x, training)


class Cell(Module):
    def __init__(self, registry: OperatorRegistry, channels: int,
                 c_prev_prev: int, c_prev: int, reduction: bool,
                 reduction_prev: bool, rng, affine: bool = False):
        self.reduction = reduction
        self.kind = "reduction" if reduction else "normal"
        self.channels = channels
        if reduction_prev:
            self.pre0 = FactorizedReduce(c_prev_prev, channels, rng,
                                         affine=affine)
        else:
            self.pre0 = ReLUConvBN(c_prev_prev, channels, 1, rng,
                                   affine=affine)
        self.pre1 = ReLUConvBN(c_prev, channels, 1, rng, affine=affine)
        self.ops = {}
        for i, j in edge_ids():
            stride = 2 if reduction and i < 2 else 1
            self.ops[(i, j)] = MixedOp(registry, channels, stride, rng,
                                       affine=affine)

    def parameters(self):
        out = super().parameters()
        for key in sorted(self.ops):
            out.extend(self.ops[key].parameters())
        return out

    def forward_cell(self, s0: Tensor, s1: Tensor, edge_states: dict,
                     mask_rng, sample_rate: float, lam: float,
                     training: bool, probe=None) -> Tensor:
        nodes = [self.pre0(s0, training), self.pre1(s1, training)]
        for j in INTERMEDIATE_NODES:
            edges = [edge_states[(self.kind, i, j)] for i in range(j)]
            betas = ad.concat([e.beta.reshape(1) for e in edges], axis=0)
            w = ad.softmax(betas, axis=-1)
            acc = None
            for pos, i in enumerate(range(j)):
                op = self.ops[(i, j)]
                if probe is not None and probe[:3] == (self.kind, i, j):
                    y = op.forward_single(nodes[i], probe[3], training)
                else:
                    mask = sample_mask(mask_rng, self.channels, sample_rate)
                    y = op.forward_mixed(nodes[i], edges[pos], mask, lam,
                                         training)
                y = y * w[pos]
                acc = y if acc is None else acc + y
            nodes.append(acc)
        return ad.concat(nodes[2:], axis=1)


class SuperNet(Module):
    """Stem -> groups of (normal, normal, reduction) cells -> pooled head."""

    def __init__(self, registry: OperatorRegistry, rng,
                 init_channels: int = 16, num_groups: int = 2,
                 num_classes: int = 2, lam: float = 0.15,
                 arch_noise: float = 1e-3):
        self.registry = registry
        self.lam = lam
        self.num_groups = num_groups
        self.stem_conv = Conv2d(3, init_channels, 3, rng, padding=1)
        self.stem_bn = BatchNorm2d(init_channels, affine=False)

        pattern = [False, False, True] * num_groups
        kinds = {"normal"} | ({"reduction"} if any(pattern) else set())
        self.edge_states = init_edge_states(registry, sorted(kinds), rng,
                                            noise=arch_noise)

        self.cells = []
        c_pp = c_p = init_channels
        channels = init_channels
        reduction_prev = False
        for reduction in pattern:
            if reduction:
                channels *= 2
            cell = Cell(registry, channels, c_pp, c_p, reduction,
                        reduction_prev, rng, affine=False)
            self.cells.append(cell)
            c_pp, c_p = c_p, channels * NUM_INTERMEDIATE
            reduction_prev = reduction
        self.classifier = Linear(c_p, num_classes, rng)

    def parameters(self):
        # network weights only; architecture logits live in edge_states
        out = self.stem_conv.parameters() + self.stem_bn.parameters()
        for cell in self.cells:
            out.extend(cell.parameters())
        out.extend(self.classifier.parameters())
        return out

    def arch_parameters(self):
        out = []
        for key in sorted(self.edge_states):
            e = self.edge_states[key]
            out.append(e.alpha)
            out.append(e.beta)
        return out

    def forward(self, x: Tensor, mask_rng, sample_rate: float = 1.0,
                training: bool = True, probe=None) -> Tensor:
        n, c, h, w = x.shape
        if h % (2 ** self.num_groups) or w % (2 ** self.num_groups):
            raise ValueError(f"spatial size {h}x{w} not divisible by "
                             f"{2 ** self.num_groups}")
        s = self.stem_bn(self.stem_conv(x, training), training)
        s0 = s1 = s
        for cell in self.cells:
            s0, s1 = s1, cell.forward_cell(s0, s1, self.edge_states, mask_rng,
                                           sample_rate, self.lam, training,
                                           probe=probe)
        return self.classifier(ad.global_avg_pool(s1), training)
