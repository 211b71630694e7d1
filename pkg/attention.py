"""
Attention blocks of the event transformer
LXformer attends over temporally nearest events, SCformer over active pixels
of a stacked sparse frame, GXformer from every event to FPS-selected
representatives. Each block exposes delta() (the residual-free update) and
forward() = F + delta().
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Optional

import numpy as np

from config import AttentionConfig
from errors import DimensionError, EmptyStreamError
from events_io import NormalizedEvents
from geometry import (SampledSet, SparseGrid, build_sparse_grid, knn_temporal, neighbor_table,
                      sample_and_group)
from numerics import (Mlp, Module, Parameter, Tensor, record_op, concat, layer_norm, reshape, segment_sum,
                      softmax, sum_, take)

logger = logging.getLogger(__name__)

__all__ = ["AttentionConfig", "StageIndex", "RelPosEncoder", "FrameStack", "LXformer", "SCformer",
           "GXformer", "stack_frame", "sparse_conv", "lxformer_forward", "scformer_forward",
           "gxformer_forward"]


class StageIndex:
    """Neighbour structures for one event set, built on first use and shared by all blocks of a stage"""

    def __init__(self, events: NormalizedEvents, grid: Optional[SparseGrid] = None,
                 temporal: Optional[Dict[int, np.ndarray]] = None):
        if len(events) == 0:
            raise EmptyStreamError("no events to index")
        self.events = events
        if grid is not None:
            self.__dict__["grid"] = grid
        self._temporal: Dict[int, np.ndarray] = dict(temporal or {})
        self._tables: Dict[int, np.ndarray] = {}
        self._groups: Dict[int, SampledSet] = {}

    def temporal(self, M: int) -> np.ndarray:
        if M not in self._temporal:
            self._temporal[M] = knn_temporal(self.events.times, M)
        return self._temporal[M]

    @cached_property
    def grid(self) -> SparseGrid:
        height, width = self.events.sensor_dims
        return build_sparse_grid(self.events.pixel_x, self.events.pixel_y, height, width)

    def table(self, w: int) -> np.ndarray:
        if w not in self._tables:
            self._tables[w] = neighbor_table(self.grid, w)
        return self._tables[w]

    def global_groups(self, r: int) -> SampledSet:
        if r not in self._groups:
            m = max(1, len(self.events) // r)
            self._groups[r] = sample_and_group(self.events.xyt, m, r)
        return self._groups[r]


def _check_features(events: NormalizedEvents, F: Tensor, channels: int):
    if F.ndim != 2 or F.shape[0] != len(events) or F.shape[1] != channels:
        raise DimensionError(f"expected features of shape ({len(events)}, {channels}), got {F.shape}")


class RelPosEncoder(Module):
    """MLP from a relative-position vector to a head-width encoding"""

    def __init__(self, in_features: int, head_channels: int, rng: np.random.Generator,
                 hidden: Optional[int] = None):
        self.mlp = Mlp.build(in_features, head_channels, rng, hidden=hidden)

    def forward(self, delta: np.ndarray) -> Tensor:
        return self.mlp(Tensor(delta))


def _vector_attention(query: Tensor, keys: Tensor, values: Tensor, pe: Tensor, score: Mlp,
                      mask: Optional[np.ndarray] = None):
    """Channel-wise softmax over axis 1 of score(q - k + pe), applied to v + pe"""
    weights = softmax(score(query - keys + pe), axis=1, mask=mask)
    return sum_(weights * (values + pe), axis=1), weights


class LXformer(Module):
    def __init__(self, channels: int, head_channels: int, M: int, rng: np.random.Generator,
                 pair_hidden: Optional[int] = None):
        self.channels = channels
        self.head_channels = head_channels
        self.M = M
        self.to_q = Mlp.build(channels, head_channels, rng)
        self.to_k = Mlp.build(channels, head_channels, rng)
        self.to_v = Mlp.build(channels, head_channels, rng)
        self.pos = RelPosEncoder(4, head_channels, rng, pair_hidden)
        self.score = Mlp.build(head_channels, head_channels, rng, hidden=pair_hidden)
        self.out = Mlp.build(head_channels, channels, rng)

    def attend(self, events: NormalizedEvents, F: Tensor, index: Optional[StageIndex] = None):
        _check_features(events, F, self.channels)
        neighbors = (index or StageIndex(events)).temporal(self.M)
        n = len(events)
        q = reshape(self.to_q(F), (n, 1, self.head_channels))
        pe = self.pos(events.matrix[:, None, :] - events.matrix[neighbors])
        return _vector_attention(q, take(self.to_k(F), neighbors), take(self.to_v(F), neighbors),
                                 pe, self.score)

    def delta(self, events: NormalizedEvents, F: Tensor, index: Optional[StageIndex] = None) -> Tensor:
        return self.out(self.attend(events, F, index)[0])

    def forward(self, events: NormalizedEvents, F: Tensor, index: Optional[StageIndex] = None) -> Tensor:
        return F + self.delta(events, F, index)

    def zero_delta_(self):
        """Zero the output MLP's last layer so the block starts as the identity"""
        self.out.zero_last_()
        return self


@dataclass
class FrameStack:
    """Per active site: (count_pos, count_neg) and the mean member feature"""

    counts: np.ndarray
    mean_features: Tensor

    @property
    def vectors(self) -> Tensor:
        return concat([Tensor(self.counts), self.mean_features], axis=1)

    @property
    def site_polarity(self) -> np.ndarray:
        return np.sign(self.counts[:, 0] - self.counts[:, 1])


def stack_frame(events: NormalizedEvents, F: Tensor, grid: SparseGrid) -> FrameStack:
    if len(events) == 0:
        raise EmptyStreamError("cannot stack an empty stream")
    num_sites = grid.num_sites
    positive = events.polarity > 0
    counts = np.column_stack([
        np.bincount(grid.site_of_event[positive], minlength=num_sites),
        np.bincount(grid.site_of_event[~positive], minlength=num_sites),
    ]).astype(np.float64)
    inv_count = (1.0 / counts.sum(axis=1))[:, None]
    return FrameStack(counts, segment_sum(F, grid.site_of_event, num_sites) * Tensor(inv_count))


def _sparse_conv_op(features: Tensor, kernel: Tensor, table: np.ndarray) -> Tensor:
    pairs = []
    for o in range(table.shape[1]):
        out_sites = np.nonzero(table[:, o] >= 0)[0]
        pairs.append((out_sites, table[out_sites, o]))
    # per offset each input and output site appears once, so fancy-index += is exact
    out = np.zeros((features.shape[0], kernel.shape[2]), dtype=np.result_type(features.data, kernel.data))
    for o, (dst, src) in enumerate(pairs):
        if dst.size:
            out[dst] += features.data[src] @ kernel.data[o]

    def backward(g):
        g_features = np.zeros_like(features.data)
        g_kernel = np.zeros_like(kernel.data)
        for o, (dst, src) in enumerate(pairs):
            if dst.size:
                g_features[src] += g[dst] @ kernel.data[o].T
                g_kernel[o] = features.data[src].T @ g[dst]
        return g_features, g_kernel

    return record_op(out, (features, kernel), backward, "sparse_conv")


def sparse_conv(grid: SparseGrid, features: Tensor, kernel: Tensor, table: Optional[np.ndarray] = None) -> Tensor:
    """Submanifold convolution: outputs on active sites only, inactive sites contribute zero

    kernel has shape (k*k, C_in, C_out) with taps in row-major (dy, dx) order.
    """
    taps = kernel.shape[0]
    k = int(round(math.sqrt(taps)))
    if k * k != taps or k % 2 == 0:
        raise DimensionError(f"kernel needs an odd square number of taps, got {taps}")
    if features.shape != (grid.num_sites, kernel.shape[1]):
        raise DimensionError(f"features {features.shape} do not match {grid.num_sites} sites x {kernel.shape[1]}")
    return _sparse_conv_op(features, kernel, neighbor_table(grid, k) if table is None else table)


class SCformer(Module):
    def __init__(self, channels: int, head_channels: int, window: int, kernel_size: int,
                 rng: np.random.Generator, pair_hidden: Optional[int] = None):
        self.channels = channels
        self.head_channels = head_channels
        self.window = window
        self.kernel_size = kernel_size
        frame_channels = 2 + channels
        bound = 1.0 / math.sqrt(kernel_size * kernel_size * frame_channels)
        shape = (kernel_size * kernel_size, frame_channels, head_channels)
        self.norm_gain = Parameter(np.ones(frame_channels))
        self.norm_bias = Parameter(np.zeros(frame_channels))
        self.q_kernel = Parameter(rng.uniform(-bound, bound, shape))
        self.k_kernel = Parameter(rng.uniform(-bound, bound, shape))
        self.v_kernel = Parameter(rng.uniform(-bound, bound, shape))
        self.pos = RelPosEncoder(3, head_channels, rng, pair_hidden)
        self.score = Mlp.build(head_channels, head_channels, rng, hidden=pair_hidden)
        self.inner = Mlp.build(head_channels, channels, rng)
        self.phi = Mlp.build(2 * channels, channels, rng, activation="gelu")

    def attend(self, events: NormalizedEvents, F: Tensor, index: Optional[StageIndex] = None):
        _check_features(events, F, self.channels)
        index = index or StageIndex(events)
        grid = index.grid
        frame = stack_frame(events, F, grid)
        normed = layer_norm(frame.vectors, self.norm_gain, self.norm_bias)
        conv_table = index.table(self.kernel_size)
        q = sparse_conv(grid, normed, self.q_kernel, conv_table)
        k = sparse_conv(grid, normed, self.k_kernel, conv_table)
        v = sparse_conv(grid, normed, self.v_kernel, conv_table)

        window = index.table(self.window)
        valid = window >= 0
        num_sites = grid.num_sites
        safe = np.where(valid, window, np.arange(num_sites)[:, None])
        coords = np.column_stack([grid.sites, frame.site_polarity]).astype(np.float64)
        delta = np.where(valid[:, :, None], coords[:, None, :] - coords[safe], 0.0)
        pe = self.pos(delta)
        q = reshape(q, (num_sites, 1, self.head_channels))
        return _vector_attention(q, take(k, safe), take(v, safe), pe, self.score, mask=valid[:, :, None])

    def delta(self, events: NormalizedEvents, F: Tensor, index: Optional[StageIndex] = None) -> Tensor:
        index = index or StageIndex(events)
        site_out = self.inner(self.attend(events, F, index)[0])
        per_event = take(site_out, index.grid.site_of_event)
        return self.phi(concat([F, per_event], axis=1))

    def forward(self, events: NormalizedEvents, F: Tensor, index: Optional[StageIndex] = None) -> Tensor:
        return F + self.delta(events, F, index)

    def zero_delta_(self):
        """Zero the last layer of phi so the block starts as the identity"""
        self.phi.zero_last_()
        return self


class GXformer(Module):
    def __init__(self, channels: int, head_channels: int, r: int, rng: np.random.Generator,
                 pair_hidden: Optional[int] = None):
        self.channels = channels
        self.head_channels = head_channels
        self.r = r
        self.group_mlp = Mlp.build(4 + channels, channels, rng)
        self.to_q = Mlp.build(channels, head_channels, rng)
        self.to_v = Mlp.build(channels, head_channels, rng)
        self.to_k = Mlp.build(channels, head_channels, rng)
        self.pos = RelPosEncoder(4, head_channels, rng, pair_hidden)
        self.score = Mlp.build(head_channels, head_channels, rng, hidden=pair_hidden)
        self.out = Mlp.build(head_channels, channels, rng)

    def pooled(self, events: NormalizedEvents, F: Tensor, sampled: SampledSet) -> Tensor:
        """Per center: elementwise max over its group of MLP(concat(e_k, f_k))"""
        groups = sampled.groups
        grouped = concat([Tensor(events.matrix[groups]), take(F, groups)], axis=-1)
        return self.group_mlp(grouped).max(axis=1)

    def attend(self, events: NormalizedEvents, F: Tensor, index: Optional[StageIndex] = None):
        _check_features(events, F, self.channels)
        sampled = (index or StageIndex(events)).global_groups(self.r)
        n, m = len(events), sampled.center_indices.size
        f_hat = self.pooled(events, F, sampled)
        q_hat = reshape(self.to_q(f_hat), (1, m, self.head_channels))
        v_hat = reshape(self.to_v(f_hat), (1, m, self.head_channels))
        k = reshape(self.to_k(F), (n, 1, self.head_channels))
        centers = events.matrix[sampled.center_indices]
        pe = self.pos(events.matrix[:, None, :] - centers[None, :, :])
        weights = softmax(self.score(k - q_hat + pe), axis=1)
        return sum_(weights * (v_hat + pe), axis=1), weights

    def delta(self, events: NormalizedEvents, F: Tensor, index: Optional[StageIndex] = None) -> Tensor:
        return self.out(self.attend(events, F, index)[0])

    def forward(self, events: NormalizedEvents, F: Tensor, index: Optional[StageIndex] = None) -> Tensor:
        return F + self.delta(events, F, index)

    def zero_delta_(self):
        self.out.zero_last_()
        return self


def lxformer_forward(events: NormalizedEvents, F: Tensor, neighbors: np.ndarray, block: LXformer) -> Tensor:
    if neighbors.shape != (len(events), block.M):
        raise DimensionError(f"neighbour index {neighbors.shape} was not built with M={block.M}")
    return block(events, F, StageIndex(events, temporal={block.M: neighbors}))


def scformer_forward(events: NormalizedEvents, F: Tensor, grid: SparseGrid, block: SCformer) -> Tensor:
    return block(events, F, StageIndex(events, grid=grid))


def gxformer_forward(events: NormalizedEvents, F: Tensor, block: GXformer) -> Tensor:
    return block(events, F, StageIndex(events))

