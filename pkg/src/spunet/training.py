"""Self-supervised training loop, checkpoints and whole-cloud inference."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .geometry import as_points, coarse_indices, denormalize, fps, geodesic_patches, normalize, patch_rng
from .loss import LossWeights, SelfProjectionConfig, UniformConfig, joint_loss
from .network import NetworkConfig, ReconstructionNet

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CHECKPOINT_FORMAT = "spunet-checkpoint-v1"


@dataclass
class TrainConfig:
    N: int = 256
    r: int = 4
    patches_per_model: int = 24
    batch_size: int = 24
    epochs: int = 200
    max_steps: int = 0
    lr0: float = 1e-4
    decay_rate: float = 0.7
    decay_every: int = 50_000
    lr_floor: float = 1e-6
    graph_k: int = 5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    uniform: UniformConfig = field(default_factory=UniformConfig)
    sp: SelfProjectionConfig = field(default_factory=SelfProjectionConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lr0 > self.lr_floor > 0:
            raise ValueError("need lr0 > lr_floor > 0")
        if not 0 < self.decay_rate < 1:
            raise ValueError("decay_rate must lie in (0, 1)")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.net.r != self.r:
            raise ValueError(f"network rate {self.net.r} differs from training rate {self.r}")
        if self.N % self.r:
            raise ValueError(f"r={self.r} must divide N={self.N}")
        if self.net.K >= self.N // self.r:
            raise ValueError(f"K={self.net.K} must be smaller than the coarse patch size {self.N // self.r}")
        if self.sp.k_sp >= self.N:
            raise ValueError(f"k_sp={self.sp.k_sp} must be smaller than N={self.N}")
        if self.batch_size < 1 or self.patches_per_model < 1:
            raise ValueError("batch_size and patches_per_model must be positive")

    @classmethod
    def paper(cls, **kw):
        return cls(**kw)

    @classmethod
    def desk(cls, **kw):
        base = dict(
            N=64, r=4, patches_per_model=24, batch_size=4, epochs=40,
            lr0=1e-3, decay_every=2_000,
            net=NetworkConfig.desk(), uniform=UniformConfig(M_seeds=8), sp=SelfProjectionConfig(k_sp=8),
        )
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nested = {"weights": LossWeights, "net": NetworkConfig, "uniform": UniformConfig, "sp": SelfProjectionConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step, cfg):
    return max(cfg.lr_floor, cfg.lr0 * cfg.decay_rate ** (step // cfg.decay_every))


def adam_step(params, lr, step):
    """One Adam update on every parameter; ``step`` counts from 0.

    Gradients are consumed and reset afterwards. A parameter with no gradient
    is treated as having a zero gradient.
    """
    t = step + 1
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name}")
        p.adam_m *= ADAM_BETA1
        p.adam_m += (1.0 - ADAM_BETA1) * g
        p.adam_v *= ADAM_BETA2
        p.adam_v += (1.0 - ADAM_BETA2) * g * g
        p.data -= lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + ADAM_EPS)
        p.grad = None


@dataclass
class StepLog:
    step: int
    lr: float
    total: float
    rec: float
    uni: float
    sp: float

    def line(self):
        return f"{self.step}\t{self.lr!r}\t{self.total!r}\t{self.rec!r}\t{self.uni!r}\t{self.sp!r}\n"


LOG_HEADER = "# step\tlr\ttotal\trec\tuni\tsp\n"


def reconstruct(net, coarse):
    """Run the network over coarse patches ``(B, r, M, 3)`` -> fine ``(B, r, r*M, 3)``."""
    B, r, M = coarse.shape[:3]
    out = net(coarse.reshape(B * r, M, 3))
    return ad.reshape(out, (B, r, r * M, 3))


def split_coarse(patches, r, seed, key):
    """Coarse subsets for a batch of patches ``(B, N, 3)``; keyed per ``key + b``."""
    idx = np.stack([coarse_indices(p, r, seed, k) for p, k in zip(patches, key)])
    return np.take_along_axis(patches[:, None], idx[..., None], axis=2)


class Trainer:
    """Owns the network, optimizer state and the step counter.

    Batch composition and every random draw are keyed by ``(seed, step)``, so
    the trainer state is fully described by the parameters, the Adam moments
    and ``step``.
    """

    def __init__(self, config, patches, net=None):
        self.config = config
        self.patches = np.asarray(patches, dtype=np.float64)
        if self.patches.ndim != 3 or self.patches.shape[1:] != (config.N, 3):
            raise ValueError(f"training patches must be (P, {config.N}, 3), got {self.patches.shape}")
        self.net = ReconstructionNet(config.net, seed=config.seed) if net is None else net
        self.step = 0

    @property
    def steps_per_epoch(self):
        return max(1, math.ceil(len(self.patches) / self.config.batch_size))

    @property
    def total_steps(self):
        if self.config.max_steps:
            return self.config.max_steps
        return self.config.epochs * self.steps_per_epoch

    def batch_indices(self, step):
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = patch_rng(self.config.seed, 0xE90C, epoch).permutation(len(self.patches))
        bs = self.config.batch_size
        return order[pos * bs:(pos + 1) * bs]

    def loss(self, batch, step):
        cfg = self.config
        key = [step * 65536 + b for b in range(len(batch))]
        coarse = split_coarse(batch, cfg.r, cfg.seed, key)
        fine = reconstruct(self.net, coarse)
        return joint_loss(batch, fine, cfg.weights, cfg.uniform, cfg.sp, seed=cfg.seed, step=step)

    def train_step(self, batch=None):
        if batch is None:
            batch = self.patches[self.batch_indices(self.step)]
        res = self.loss(batch, self.step)
        total = res.total.item()
        if not math.isfinite(total):
            raise FloatingPointError(f"non-finite loss {total} at step {self.step}")
        res.total.backward()
        lr = lr_schedule(self.step, self.config)
        adam_step(self.net.parameters(), lr, self.step)
        entry = StepLog(self.step, lr, total, res.rec, res.uni, res.sp)
        self.step += 1
        return entry

    def run(self, steps=None, log_path=None, callback=None):
        steps = self.total_steps - self.step if steps is None else steps
        history = []
        fh = None
        if log_path is not None:
            new = not os.path.exists(log_path)
            fh = open(log_path, "a")
            if new:
                fh.write(LOG_HEADER)
        try:
            for _ in range(steps):
                entry = self.train_step()
                history.append(entry)
                if fh is not None:
                    fh.write(entry.line())
                if callback is not None:
                    callback(entry)
                if entry.step % 100 == 0:
                    log.info("step %d lr %.3g loss %.6g (rec %.4g uni %.4g sp %.4g)",
                             entry.step, entry.lr, entry.total, entry.rec, entry.uni, entry.sp)
        finally:
            if fh is not None:
                fh.close()
        return history

    def save(self, path):
        save_checkpoint(path, self.net, self.config, self.step)

    @classmethod
    def from_checkpoint(cls, path, patches):
        net, config, step = load_checkpoint(path)
        tr = cls(config, patches, net=net)
        tr.step = step
        return tr


def atomic_write_bytes(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, net, config, step):
    """Write parameters, Adam moments, step and config to an ``.npz`` container.

    Keys: ``format``, ``step``, ``config`` (JSON), ``generator`` (JSON of the
    keyed-generator state), then per parameter ``param/<name>``,
    ``adam_m/<name>`` and ``adam_v/<name>`` as float64 arrays.
    """
    arrays = {
        "format": np.array(CHECKPOINT_FORMAT),
        "step": np.array(step, dtype=np.int64),
        "config": np.array(json.dumps(config.to_dict(), sort_keys=True)),
        "generator": np.array(json.dumps({"seed": config.seed, "step": int(step)})),
    }
    for name, p in net.params.items():
        arrays[f"param/{name}"] = p.data
        arrays[f"adam_m/{name}"] = p.adam_m
        arrays[f"adam_v/{name}"] = p.adam_v
    atomic_write_bytes(path, npz_bytes(arrays))


def npz_bytes(arrays):
    """``.npz`` payload with fixed zip timestamps, so equal inputs give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for key, value in arrays.items():
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(value), allow_pickle=False)
    return buf.getvalue()


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        config = TrainConfig.from_dict(json.loads(str(z["config"])))
        step = int(z["step"])
        net = ReconstructionNet(config.net, seed=config.seed)
        for name, p in net.params.items():
            try:
                p.data[...] = z[f"param/{name}"]
                p.adam_m[...] = z[f"adam_m/{name}"]
                p.adam_v[...] = z[f"adam_v/{name}"]
            except KeyError:
                raise KeyError(f"{path}: checkpoint lacks parameter {name}") from None
    return net, config, step


def cloud_patches(clouds, config):
    """Normalized training patches from whole clouds, ``(P, N, 3)``."""
    out = []
    for cloud in clouds:
        pts = as_points(cloud, dim=3)
        for patch in geodesic_patches(pts, config.patches_per_model, config.N, config.graph_k):
            out.append(patch.points)
    return np.stack(out)


def upsample_patch(net, points, r, seed=0, patch_id=0):
    """Dense ``(r*N, 3)`` patch from one normalized ``(N, 3)`` input patch."""
    coarse = split_coarse(points[None], r, seed, [patch_id])
    return reconstruct(net, coarse).data.reshape(-1, 3)


def upsample_cloud(cloud, net, config, n_patches=None, seed=None):
    """Upsample a whole cloud to exactly ``r * len(cloud)`` points.

    Geodesic patches are normalized, upsampled, mapped back and merged; the
    merged set is then reduced by FPS. By default enough patches are cut to
    cover the cloud about three times.
    """
    pts = as_points(cloud, dim=3)
    N, r = config.N, config.r
    if len(pts) < N:
        raise ValueError(f"cloud of {len(pts)} points is smaller than one patch ({N})")
    if n_patches is None:
        n_patches = max(1, math.ceil(3 * len(pts) / N))
    seed = config.seed if seed is None else seed
    merged = []
    for i, patch in enumerate(geodesic_patches(pts, n_patches, N, config.graph_k)):
        dense = upsample_patch(net, patch.points, r, seed, i)
        merged.append(denormalize(dense, patch.center, patch.scale))
    merged = np.concatenate(merged)
    target = r * len(pts)
    if len(merged) < target:
        raise ValueError(f"only {len(merged)} points generated for a target of {target}; use more patches")
    return merged[fps(merged, target, 0)]


def duplicate_jitter(cloud, r, radius=0.02, seed=0):
    """Baseline upsampler: each point copied ``r`` times, jittered inside a ball."""
    pts = as_points(cloud, dim=3)
    rng = np.random.default_rng(seed)
    n = len(pts) * r
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radial = radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    return np.repeat(pts, r, axis=0) + direction * radial


def gradcheck_network(config, seed=0, eps=1e-5, max_slots=4, kink_tol=1e-6):
    """Gradient check of the joint loss w.r.t. every network parameter.

    One random training-sized patch is drawn from a noisy sphere, split into
    its coarse subsets and pushed through the full network and loss. Slots
    sitting within ``eps`` of a kink are skipped (see ``grad_check_detail``).
    Returns a :class:`~spunet.autodiff.GradCheckResult`.
    """
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((config.N, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts += 0.05 * rng.standard_normal(pts.shape)
    trainer = Trainer(config, normalize(pts)[0][None])
    batch = trainer.patches

    def f():
        return trainer.loss(batch, 0).total

    return ad.grad_check_detail(f, trainer.net.parameters(), eps, max_slots, rng, kink_tol)
