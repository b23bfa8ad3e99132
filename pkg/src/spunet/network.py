"""Coarse-to-fine reconstruction network.

Maps a coarse patch of ``M`` points to a fine patch of ``r * M`` points:

    coords -> 3 x edge conv (dynamic k-NN graphs) -> self-attention per level
           -> concat + MLP -> self-attention -> folding blocks with fixed and
           learnable 2-D codes -> MLP -> coordinate regression

All functions accept a leading batch axis: inputs are ``(B, M, C)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Value
from .geometry import knn


@dataclass
class NetworkConfig:
    K: int = 10
    D: int = 64
    C: int = 480
    C_prime: int = 128
    r: int = 4
    levels: int = 3
    fixed_grid_span: float = 0.2
    head_width: int = 64
    coordinate_skip: bool = True
    use_self_attention: bool = True
    use_learnable_grid: bool = True
    use_hierarchical_folding: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.r < 1 or math.isqrt(self.r) ** 2 != self.r:
            raise ValueError(f"upsampling rate r={self.r} must be a perfect square")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if min(self.D, self.C, self.C_prime, self.head_width) <= 0:
            raise ValueError("feature widths must be positive")
        if self.levels != 3:
            raise ValueError("the extractor is built with exactly 3 GCN levels")

    @classmethod
    def paper(cls, **kw):
        return cls(**kw)

    @classmethod
    def desk(cls, **kw):
        base = dict(K=6, D=16, C=64, C_prime=32)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


def glorot(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def attention_width(c):
    return max(4, c // 4)


def fixed_codes(u, span):
    """``u`` codes evenly spaced along the diagonal of ``[-span, span]^2``."""
    t = np.linspace(-span, span, u) if u > 1 else np.zeros(1)
    return np.stack([t, t], axis=1)


def linear(x, weight, bias):
    """Per-point affine map over the last axis of ``x``."""
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1]))
    out = ad.add(ad.matmul(flat, weight), bias)
    return ad.reshape(out, lead + (weight.shape[1],))


def batch_knn(features, k):
    """k-NN index per batch element, offset into the flattened ``(B*M)`` rows."""
    feats = features.data if isinstance(features, Value) else np.asarray(features)
    B, M = feats.shape[:2]
    if k >= M:
        raise ValueError(f"neighbor count K={k} must be smaller than the point count {M}")
    idx = np.stack([knn(feats[b], k).indices for b in range(B)])
    return idx + (np.arange(B) * M)[:, None, None]


def edge_conv(features, neighbors, weight, bias):
    """One graph-convolution level.

    ``neighbors`` holds flat row indices of shape ``(B, M, K)``. Each point
    maps its edges ``f_j - f_i`` through a shared linear layer and ReLU, then
    max-pools over the K neighbors.
    """
    B, M, C = features.shape
    flat = ad.reshape(features, (B * M, C))
    nbr = ad.gather(flat, neighbors)
    center = ad.reshape(features, (B, M, 1, C))
    edges = ad.sub(nbr, center)
    h = ad.relu(linear(edges, weight, bias))
    return ad.reduce_max(h, axis=2)


def self_attention(features, w):
    """Residual attention ``F + softmax(Y X^T) H`` with row-wise softmax.

    ``w`` maps ``"x"``, ``"y"``, ``"h"`` to ``(weight, bias)`` pairs.
    """
    x = linear(features, *w["x"])
    y = linear(features, *w["y"])
    h = linear(features, *w["h"])
    attn = ad.softmax(ad.matmul(y, ad.transpose(x)), axis=-1)
    return ad.add(features, ad.matmul(attn, h))


class ReconstructionNet:
    """Parameter container plus the forward pass of the coarse-to-fine network."""

    def __init__(self, config, seed=0):
        self.config = config
        self.params = {}
        rng = np.random.default_rng(seed)
        cfg = config

        def dense(name, fan_in, fan_out):
            self._add(f"{name}.weight", glorot(rng, fan_in, fan_out))
            self._add(f"{name}.bias", np.zeros(fan_out))

        def attention(name, width):
            aw = attention_width(width)
            dense(f"{name}.x", width, aw)
            dense(f"{name}.y", width, aw)
            dense(f"{name}.h", width, width)

        widths = [3] + [cfg.D] * cfg.levels
        for lvl in range(cfg.levels):
            dense(f"extract.gcn{lvl}", widths[lvl], widths[lvl + 1])
        if cfg.use_self_attention:
            for lvl in range(1, cfg.levels + 1):
                attention(f"extract.att{lvl}", cfg.D)
        agg_in = cfg.D * (cfg.levels + 1) + (3 if cfg.coordinate_skip else 0)
        dense("extract.agg.hidden", agg_in, cfg.C)
        dense("extract.agg.out", cfg.C, cfg.C)
        if cfg.use_self_attention:
            attention("extract.att_final", cfg.C)

        code_dim = 4 if cfg.use_learnable_grid else 2
        for i, u in enumerate(self.block_rates):
            if cfg.use_learnable_grid:
                self._add(f"expand.block{i}.grid", rng.standard_normal((u, 2)))
            dense(f"expand.block{i}.mlp", cfg.C + code_dim, cfg.C)
        dense("expand.reduce", cfg.C, cfg.C_prime)
        dense("head.fc0", cfg.C_prime, cfg.head_width)
        dense("head.fc1", cfg.head_width, 3)

    def _add(self, name, data):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Parameter(name, data)

    @property
    def block_rates(self):
        cfg = self.config
        if cfg.use_hierarchical_folding:
            u = math.isqrt(cfg.r)
            return [u, u]
        return [cfg.r]

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def w(self, name):
        return self.params[f"{name}.weight"], self.params[f"{name}.bias"]

    def att(self, name):
        return {k: self.w(f"{name}.{k}") for k in ("x", "y", "h")}

    def extract_features(self, coarse):
        """``(B, M, 3)`` coordinates to ``(B, M, C)`` features."""
        cfg = self.config
        feats = coords = ad.const(coarse)
        plain, attended = [], []
        for lvl in range(cfg.levels):
            nbr = batch_knn(feats, cfg.K)
            feats = edge_conv(feats, nbr, *self.w(f"extract.gcn{lvl}"))
            plain.append(feats)
            if cfg.use_self_attention:
                attended.append(self_attention(feats, self.att(f"extract.att{lvl + 1}")))
            else:
                attended.append(feats)
        # edge features are translation invariant; the skip restores position
        skip = [coords] if cfg.coordinate_skip else []
        agg = ad.concat(skip + [plain[0]] + attended, axis=-1)
        agg = ad.relu(linear(agg, *self.w("extract.agg.hidden")))
        agg = linear(agg, *self.w("extract.agg.out"))
        if cfg.use_self_attention:
            agg = self_attention(agg, self.att("extract.att_final"))
        return agg

    def upsample_block(self, feats, i, u):
        B, M, C = feats.shape
        rep = ad.tile(ad.reshape(feats, (B, M, 1, C)), u, axis=2)
        rep = ad.reshape(rep, (B, M * u, C))
        grid = np.broadcast_to(fixed_codes(u, self.config.fixed_grid_span), (B, M, u, 2))
        parts = [rep, ad.const(grid.reshape(B, M * u, 2))]
        if self.config.use_learnable_grid:
            code = ad.reshape(self.params[f"expand.block{i}.grid"], (1, 1, u, 2))
            code = ad.tile(ad.tile(code, M, axis=1), B, axis=0)
            parts.append(ad.reshape(code, (B, M * u, 2)))
        x = ad.concat(parts, axis=-1)
        return ad.relu(linear(x, *self.w(f"expand.block{i}.mlp")))

    def expand_features(self, feats, return_intermediate=False):
        """``(B, M, C)`` to ``(B, r*M, C_prime)`` by duplication and folding."""
        stages = []
        for i, u in enumerate(self.block_rates):
            feats = self.upsample_block(feats, i, u)
            stages.append(feats)
        out = ad.relu(linear(feats, *self.w("expand.reduce")))
        if return_intermediate:
            return out, stages
        return out

    def regress(self, feats):
        h = ad.relu(linear(feats, *self.w("head.fc0")))
        return linear(h, *self.w("head.fc1"))

    def forward(self, coarse):
        """Coarse patches ``(B, M, 3)`` (or a single ``(M, 3)``) to fine patches."""
        data = coarse.data if isinstance(coarse, Value) else np.asarray(coarse, dtype=np.float64)
        single = data.ndim == 2
        if single:
            coarse = ad.reshape(ad.const(coarse), (1,) + data.shape)
        out = self.regress(self.expand_features(self.extract_features(coarse)))
        if single:
            out = ad.reshape(out, out.shape[1:])
        return out

    __call__ = forward

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            p = self.params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"{k}: shape {v.shape} != {p.shape}")
            p.data[...] = v


def coarse_to_fine(coarse, net):
    """Fine patch ``(N, 3)`` reconstructed from one coarse patch ``(N/r, 3)``."""
    return net.forward(coarse)
