import csv
import math

import numpy as np
import pytest

from srgan import models as M
from srgan import trainer as T
from srgan.checkpoint import load_checkpoint
from srgan.config import TrainSchedule, load_config
from srgan.errors import DataError, InvalidArgument, MissingGradient, ProvenanceError
from srgan.losses import LossSpec
from srgan.synthetic import write_toy_dataset

GEN = M.GeneratorConfig(blocks=1, width=4)
DISC = M.DiscriminatorConfig(input_size=16, widths=(2, 2, 4, 4, 4, 4, 8, 8), dense_width=8)
MSE = LossSpec(adversarial_weight=0.0)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    return write_toy_dataset(tmp_path_factory.mktemp("toy"), count=3, size=32, seed=1)


def sched(iters=4, lr=1e-3, **kw):
    kw.setdefault("batch_size", 2)
    kw.setdefault("crop", 16)
    return TrainSchedule(lr_segments=((iters, lr),), **kw)


def scalar_model(value, grad):
    mp = M.ModelParams("x", None)
    p = mp.add("w", np.array([value], dtype=np.float64))
    p.grad[...] = grad
    return mp


def reference_adam(x, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_first_step():
    mp = scalar_model(0.0, 1.0)
    st = T.AdamState(lr=0.1)
    T.adam_step(mp, st)
    assert mp["w"].data[0] == pytest.approx(-0.1, abs=1e-8)
    assert st.t == 1
    assert mp["w"].grad[0] == 0


def test_adam_zero_gradient():
    mp = scalar_model(0.7, 0.0)
    st = T.AdamState(lr=0.1)
    T.adam_step(mp, st)
    assert mp["w"].data[0] == 0.7 and st.t == 1


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(10)]
    mp = M.ModelParams("x", None)
    p = mp.add("w", x0.copy())
    st = T.AdamState(lr=1e-2)
    for k, g in enumerate(grads, 1):
        p.grad[...] = g
        T.adam_step(mp, st)
        ref = reference_adam(x0, grads[:k], 1e-2)
        np.testing.assert_allclose(p.data, ref, rtol=1e-6, atol=1e-12)
        assert np.all(st.v["w"] >= 0)


def test_adam_missing_gradient():
    mp = scalar_model(0.0, 0.0)
    mp["w"].grad = None
    with pytest.raises(MissingGradient):
        T.adam_step(mp, T.AdamState())


def test_lr_schedule():
    s = TrainSchedule(lr_segments=((100, 1e-4), (100, 1e-5)), crop=32)
    assert s.iterations == 200
    assert s.lr_at(100) == 1e-4 and s.lr_at(101) == 1e-5
    with pytest.raises(InvalidArgument):
        TrainSchedule(lr_segments=())
    with pytest.raises(InvalidArgument):
        TrainSchedule(crop=30)


def test_sampler_determinism_and_replacement(toy):
    images = T.load_training_images(toy)
    s = sched(batch_size=7)  # more than the 3 images
    a, b = T.BatchSampler(images, s), T.BatchSampler(images, s)
    lr1, hr1 = a.next()
    lr2, hr2 = b.next()
    assert lr1.shape == (7, 3, 4, 4) and hr1.shape == (7, 3, 16, 16)
    assert np.array_equal(lr1, lr2) and np.array_equal(hr1, hr2)
    assert hr1.min() >= -1 and hr1.max() <= 1 and lr1.min() >= 0


def test_empty_data(tmp_path):
    (tmp_path / "m.txt").write_text("# nothing\n")
    with pytest.raises(DataError):
        T.load_training_images(tmp_path / "m.txt")


def test_set_eval_mode_round_trip():
    g = M.build_generator(GEN, 0)
    x = np.random.default_rng(0).random((2, 3, 4, 4)).astype(np.float32)
    T.set_eval_mode(g)
    before = g.bn["post.bn"].running_mean.copy()
    assert np.array_equal(M.generator_forward(g, x), M.generator_forward(g, x))
    assert np.array_equal(before, g.bn["post.bn"].running_mean)
    T.set_train_mode(g)
    M.generator_forward(g, x)
    assert not np.array_equal(before, g.bn["post.bn"].running_mean)


def test_pretrain_outputs(toy, tmp_path):
    g = M.build_generator(GEN, 0)
    log = T.pretrain_srresnet(g, toy, MSE, sched(5, checkpoint_every=2), out_dir=tmp_path)
    assert len(log.rows) == 5
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["checkpoint_00000002.srck", "checkpoint_00000004.srck", "final.srck", "loss.csv"]
    rows = list(csv.DictReader(open(tmp_path / "loss.csv")))
    assert [int(r["iteration"]) for r in rows] == [1, 2, 3, 4, 5]
    ck = load_checkpoint(tmp_path / "final.srck")
    assert ck.step == 5 and ck.config["phase"] == "pretrain"
    g2 = T.restore_model(ck)
    assert all(np.array_equal(p.data, g2[n].data) for n, p in g)
    assert T.restore_adam(ck).t == 5


def test_pretrain_logs_loss_before_update(toy):
    g = M.build_generator(GEN, 0)
    s = sched(1)
    probe = M.build_generator(GEN, 0)
    lr_b, hr_b = T.BatchSampler(T.load_training_images(toy), s).next()
    sr = M.generator_forward(probe, lr_b, mode="train")
    expected = float(np.sum((sr.astype(np.float64) - hr_b) ** 2) / (2 * 16 * 16))
    log = T.pretrain_srresnet(g, toy, MSE, s)
    assert log.rows[0]["content"] == pytest.approx(expected, rel=1e-6)


def test_pretrain_rejects_adversarial_spec(toy):
    with pytest.raises(InvalidArgument):
        T.pretrain_srresnet(M.build_generator(GEN), toy, LossSpec(), sched())


def test_pretrain_deterministic(toy, tmp_path):
    for d in ("a", "b"):
        T.pretrain_srresnet(M.build_generator(GEN, 0), toy, MSE, sched(3), out_dir=tmp_path / d)
    for f in ("loss.csv", "final.srck"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_srgan_provenance(toy):
    g, d = M.build_generator(GEN, 0), M.build_discriminator(DISC, 1)
    s = sched(1)
    with pytest.raises(ProvenanceError):
        T.train_srgan(g, d, toy, LossSpec(), s)
    with pytest.raises(ProvenanceError):
        T.train_srgan(g, d, toy, LossSpec(), s, provenance="gan")
    T.train_srgan(g, d, toy, LossSpec(), s, allow_unpretrained=True)


def test_srgan_isolation_schedule_and_first_loss(toy, tmp_path):
    g, d = M.build_generator(GEN, 0), M.build_discriminator(DISC, 1)
    s = TrainSchedule(lr_segments=((2, 1e-3), (2, 1e-4)), batch_size=2, crop=16, checkpoint_every=2)
    sums = {"g": [g.checksum()], "d": [d.checksum()]}
    violations = []

    def watch(it, stage):
        still = "g" if stage == "d" else "d"
        moved = "d" if stage == "d" else "g"
        now = {"g": g.checksum(), "d": d.checksum()}
        if now[still] != sums[still][-1]:
            violations.append((it, stage))
        sums[moved].append(now[moved])

    log = T.train_srgan(g, d, toy, LossSpec(), s, provenance="pretrain", out_dir=tmp_path,
                        on_iteration=watch)
    assert not violations
    assert len(set(sums["g"])) == 5 and len(set(sums["d"])) == 5
    assert [r["lr"] for r in log.rows] == [1e-3, 1e-3, 1e-4, 1e-4]
    assert 1.0 <= log.rows[0]["d_loss"] <= 1.8
    assert all(0 < r["d_fake"] < 1 for r in log.rows)
    ck = load_checkpoint(tmp_path / "final.srck")
    assert ck.config["phase"] == "gan" and ck.step == 4
    assert T.restore_adam(ck, "discriminator").t == 4
    T.restore_model(ck, "discriminator")


def test_srgan_feature_content(toy):
    cfg = M.FeatureExtractorConfig(widths=(4, 4, 4, 4, 4), tap=(2, 1))
    ext = M.build_feature_extractor(cfg, 0)
    g, d = M.build_generator(GEN, 0), M.build_discriminator(DISC, 1)
    log = T.train_srgan(g, d, toy, LossSpec(content="feature", tap=(2, 1)), sched(2),
                        extractor=ext, provenance="pretrain")
    assert all(math.isfinite(r["g_total"]) for r in log.rows)


def test_toy_preset_loads():
    cfg, eff = load_config(preset="toy", overrides=["pretrain.batch_size=4"], seed=3)
    assert cfg.generator.blocks == 2 and cfg.generator.width == 16
    assert cfg.pretrain.batch_size == 4 and cfg.pretrain.seed == 3 and cfg.gan.seed == 3
    assert eff["preset"] == "toy"
    with pytest.raises(InvalidArgument):
        load_config(preset="toy", overrides=["generator.depth=3"])
