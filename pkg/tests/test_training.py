import numpy as np
import pytest

from spunet import autodiff as ad
from spunet.autodiff import Parameter
from spunet.geometry import normalize
from spunet.io import sample_mesh
from spunet.loss import LossWeights
from spunet.shapes import icosphere
from spunet.training import (
    TrainConfig,
    Trainer,
    adam_step,
    duplicate_jitter,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    upsample_cloud,
)


def sphere_patches(n_patches=4, n=64, seed=0):
    """Normalized caps of a random unit sphere, ``n`` points each."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_patches):
        p = rng.standard_normal((4 * n, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        out.append(normalize(p[np.argsort(-p[:, 2])[:n]])[0])
    return np.stack(out)


def test_lr_schedule_steps():
    cfg = TrainConfig.paper()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(49_999, cfg) == 1e-4
    assert lr_schedule(50_000, cfg) == pytest.approx(7e-5, rel=1e-15)
    assert lr_schedule(10**7, cfg) == 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig.desk(lr0=1e-7)
    with pytest.raises(ValueError):
        TrainConfig.desk(N=66)
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig.desk()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_adam_zero_gradient_is_a_no_op():
    p = Parameter("p", [1.0, -2.0])
    p.grad = np.zeros(2)
    adam_step([p], 1e-2, 0)
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_constant_gradient_moves_by_lr():
    p = Parameter("p", [0.0])
    for t in range(5):
        before = p.data.copy()
        p.grad = np.array([0.3])
        adam_step([p], 1e-3, t)
        assert before[0] - p.data[0] == pytest.approx(1e-3, rel=1e-6)


def test_adam_minimizes_a_quadratic_bowl():
    p = Parameter("p", [0.05, -0.03, 0.02])
    for t in range(500):
        ad.reduce_sum(ad.square(p)).backward()
        adam_step([p], 1e-2, t)
    assert np.linalg.norm(p.data) < 1e-3


def test_adam_rejects_non_finite_gradient():
    p = Parameter("layer.weight", [1.0])
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="layer.weight"):
        adam_step([p], 1e-3, 0)


def desk(**kw):
    return TrainConfig.desk(**kw)


def test_checkpoint_round_trip(tmp_path):
    patches = sphere_patches()
    tr = Trainer(desk(), patches)
    tr.run(3)
    path = tmp_path / "ck.npz"
    tr.save(path)
    net, cfg, step = load_checkpoint(path)
    assert step == 3 and cfg == tr.config
    batch = patches[:2]
    again = Trainer(cfg, patches, net=net)
    assert again.loss(batch, 0).total.item() == tr.loss(batch, 0).total.item()
    for name, p in tr.net.params.items():
        assert np.array_equal(p.adam_v, net.params[name].adam_v)


def test_checkpoint_bytes_are_reproducible(tmp_path):
    tr = Trainer(desk(), sphere_patches())
    save_checkpoint(tmp_path / "a.npz", tr.net, tr.config, 0)
    save_checkpoint(tmp_path / "b.npz", tr.net, tr.config, 0)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_training_is_deterministic():
    patches = sphere_patches()
    a = [e.total for e in Trainer(desk(), patches).run(5)]
    b = [e.total for e in Trainer(desk(), patches).run(5)]
    assert a == b
    c = [e.total for e in Trainer(desk(seed=1), patches).run(5)]
    assert a != c


def test_resume_is_bit_exact(tmp_path):
    patches = sphere_patches()
    straight = Trainer(desk(), patches).run(8)
    first = Trainer(desk(), patches)
    first.run(4)
    first.save(tmp_path / "mid.npz")
    resumed = Trainer.from_checkpoint(tmp_path / "mid.npz", patches).run(4)
    assert [e.total for e in straight[4:]] == [e.total for e in resumed]


def test_log_file_lines(tmp_path):
    log = tmp_path / "train.log"
    Trainer(desk(), sphere_patches()).run(3, log_path=log)
    lines = log.read_text().splitlines()
    assert lines[0].startswith("# step") and len(lines) == 4
    assert lines[1].split("\t")[0] == "0"


def test_batches_cover_every_patch_each_epoch():
    tr = Trainer(desk(batch_size=3), sphere_patches(7))
    seen = np.concatenate([tr.batch_indices(s) for s in range(tr.steps_per_epoch)])
    assert sorted(seen.tolist()) == list(range(7))


def test_self_projection_only_training_lowers_the_term():
    cfg = desk(weights=LossWeights(0.0, 0.0, 1.0))
    hist = Trainer(cfg, sphere_patches()).run(30)
    assert np.mean([e.sp for e in hist[-5:]]) < hist[0].sp


def test_upsample_cloud_count():
    cloud = sample_mesh(icosphere(3), 512, seed=0)
    tr = Trainer(desk(), sphere_patches())
    dense = upsample_cloud(cloud, tr.net, tr.config, n_patches=24)
    assert dense.shape == (2048, 3)
    with pytest.raises(ValueError):
        upsample_cloud(cloud[:10], tr.net, tr.config)


def test_duplicate_jitter_stays_in_ball():
    cloud = sample_mesh(icosphere(2), 100, seed=0)
    out = duplicate_jitter(cloud, 4, radius=0.02)
    assert out.shape == (400, 3)
    assert np.all(np.linalg.norm(out - np.repeat(cloud, 4, axis=0), axis=1) <= 0.02)
