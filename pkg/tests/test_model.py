import logging

import numpy as np
import pytest

from olconvnet import dataset as ds
from olconvnet import model as md
from olconvnet import nnkernel as nk
from olconvnet.errors import FormatError, TrainingError
from olconvnet.nnkernel import TrainConfig

SMALL = (6, 4, 6)


def toy(n=8, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 20, size=(n, 27, 27, 3)).astype(np.float32)
    y = np.arange(n) % 4 + 1
    return x, y


def weights_equal(a, b):
    return all(np.array_equal(w1, w2) and np.array_equal(b1, b2) for (w1, b1), (w2, b2) in zip(a.params, b.params))


def test_architecture_anchors(caplog):
    with caplog.at_level(logging.INFO, logger="olconvnet.model"):
        m = md.Cnn3lModel(seed=0)
    assert m.feature_length == 48_400
    assert m.conv_param_count == 7_600 + 45_050 + 45_100 == 97_750
    assert m.param_count == 97_750 + 48_400 * 4 + 4
    assert "118000" in caplog.text
    assert m.layer_specs[m.feature_tap].kind == "maxpool"
    assert [s.kind for s in m.layer_specs] == ["conv", "relu"] * 3 + ["maxpool", "dense", "softmax"]


def test_channel_schedules():
    assert md.channel_schedule(1) == (100,)
    assert md.channel_schedule(3) == (100, 50, 100)
    assert md.channel_schedule(4) == (100, 50, 100, 100)
    assert md.Cnn3lModel((100,), init=False).feature_length == 48_400
    assert md.Cnn3lModel((100, 50), init=False).feature_length == 22 * 22 * 50


def test_mlp_shape():
    mlp = md.MlpModel(seed=0)
    assert mlp.in_dim == 48_409
    assert mlp.params[0][0].shape == (48_409, 10) and mlp.params[1][0].shape == (10, 4)


def test_features_of_zero_patch_match_direct_forward():
    m = md.Cnn3lModel(SMALL, seed=3)
    for w, b in m.params:
        b[:] = np.random.default_rng(4).normal(size=b.shape).astype(np.float32)
    got = md.extract_cnn_features(m, np.zeros((2, 27, 27, 3), np.float32))
    # direct forward of zeros written out layer by layer
    h = np.zeros((27, 27, 3), np.float32)
    for spec, (w, b) in zip(m.conv_specs, m.params):
        h = np.maximum(nk.conv2d_forward(h, spec, w, b), 0)
    expect = nk.maxpool_forward(h, 2, 1)[0].ravel()
    np.testing.assert_array_equal(got[0], expect)
    np.testing.assert_array_equal(got[1], expect)
    assert (md.extract_cnn_features(m, toy(4)[0]) >= 0).all()


def test_cnn_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    m = md.Cnn3lModel((2, 2), seed=6)
    m.params = [[w.astype(np.float64), b.astype(np.float64) + rng.normal(size=b.shape)] for w, b in m.params]
    x = rng.normal(size=(2, 27, 27, 3))
    y = np.array([1, 3])

    def loss():
        h = x
        for spec, (w, b) in zip(m.conv_specs, m.params):
            h = np.maximum(nk.conv2d_forward(h, spec, w, b), 0)
        f = nk.maxpool_forward(h, 2, 1)[0].reshape(2, -1)
        p = nk.softmax(nk.dense_forward(f, *m.params[-1]))
        return nk.cross_entropy(p, y).mean()

    h = x
    cache = []
    for spec, (w, b) in zip(m.conv_specs, m.params):
        z, cols = nk.conv2d_forward(h, spec, w, b, return_cols=True)
        cache.append((h, cols, z))
        h = np.maximum(z, 0)
    pooled, pidx = nk.maxpool_forward(h, 2, 1)
    f = pooled.reshape(2, -1)
    cache.append((pidx, f))
    p = nk.softmax(nk.dense_forward(f, *m.params[-1]))
    grads = m.backward(cache, nk.cross_entropy_grad(p, y) / 2)
    for (w, b), (gw, gb) in zip(m.params, grads):
        for arr, g in ((w, gw), (b, gb)):
            for flat in rng.choice(arr.size, size=min(5, arr.size), replace=False):
                i = np.unravel_index(flat, arr.shape)
                old = arr[i]
                arr[i] = old + 1e-5
                up = loss()
                arr[i] = old - 1e-5
                down = loss()
                arr[i] = old
                num = (up - down) / 2e-5
                assert abs(num - g[i]) <= 1e-4 * max(1e-3, abs(num) + abs(g[i]))


def test_overfit_eight_samples():
    x, y = toy(8)
    m, hist = md.train_cnn(x / 20, y, TrainConfig(learning_rate=0.05, epochs=200, batch_size=8, seed=1), SMALL)
    assert hist[-1].accuracy == 1.0
    probs = md.cnn_predict(m, x / 20)
    assert np.all(probs.argmax(axis=1) + 1 == y)


def test_zero_epochs_returns_initial_weights():
    x, y = toy(8)
    m, hist = md.train_cnn(x, y, TrainConfig(epochs=0, seed=9), SMALL)
    assert hist == []
    assert weights_equal(m, md.Cnn3lModel(SMALL, seed=9))


def test_training_deterministic():
    x, y = toy(12)
    cfg = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=5, seed=2)
    a, ha = md.train_cnn(x, y, cfg, SMALL)
    b, hb = md.train_cnn(x, y, cfg, SMALL)
    assert weights_equal(a, b) and ha == hb
    c, _ = md.train_cnn(x, y, TrainConfig(learning_rate=1e-3, epochs=3, batch_size=5, seed=3), SMALL)
    assert not weights_equal(a, c)


def test_non_finite_loss_reports_coordinates():
    x, y = toy(8)
    x[3, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError) as exc:
        md.train_cnn(x, y, TrainConfig(epochs=2, batch_size=4, seed=0), SMALL)
    assert exc.value.epoch == 1 and exc.value.batch in (1, 2)


def test_fuse_arithmetic():
    rng = np.random.default_rng(7)
    ol = rng.normal(5, 3, size=(30, 9))
    ol[:, 4] = 2.0  # constant column
    stats = md.ol_statistics(ol)
    fused = md.fuse(rng.random((30, 48_400)), ol, stats)
    assert fused.shape == (30, 48_409)
    block = fused[:, 48_400:].astype(np.float64)
    assert np.all(np.abs(block.mean(axis=0)) < 1e-6)
    assert np.all(block[:, 4] == 0)
    row = md.fuse(np.zeros(48_400), np.zeros(9), stats)
    mean, std = stats
    expect = np.where(std >= 1e-12, -mean / np.where(std >= 1e-12, std, 1), 0)
    np.testing.assert_allclose(row[48_400:], expect.astype(np.float32), rtol=0, atol=0)
    assert not md.fuse(np.zeros(48_400), ol[0], stats, use_ol=False)[48_400:].any()


def small_fold(n_per_class=6, seed=0):
    rng = np.random.default_rng(seed)
    n = 4 * n_per_class
    y = np.tile(np.arange(1, 5), n_per_class)
    patches = rng.integers(0, 256, size=(n, 27, 27, 3), dtype=np.uint8)
    patches[..., 2] = np.clip(patches[..., 2] // 2 + 30 * y[:, None, None], 0, 255)
    samples = [ds.LabeledSample(f"s{i}", int(l), split="train" if i % 3 else "test") for i, l in enumerate(y)]
    m = ds.DatasetManifest(samples, patches)
    ol = rng.normal(size=(n, 9)) + y[:, None]
    return m, ol


def test_stagewise_freeze_contract(monkeypatch):
    m, ol = small_fold()
    cfg = md.ExperimentConfig(TrainConfig(1e-4, 2, 8, 1), TrainConfig(1e-3, 3, 8, 2), channels=SMALL)
    fold = md.prepare_fold(m, "train", "test", ol)
    snapshots = []
    real = md.train_mlp

    def spy(fused, y, cfg_, model=None):
        snapshots.append(cnn_ref[0].copy())
        out = real(fused, y, cfg_, model)
        snapshots.append(cnn_ref[0].copy())
        return out

    real_cnn = md.train_cnn
    cnn_ref = []

    def cnn_spy(*a, **k):
        out = real_cnn(*a, **k)
        cnn_ref.append(out[0])
        return out

    monkeypatch.setattr(md, "train_mlp", spy)
    monkeypatch.setattr(md, "train_cnn", cnn_spy)
    cnn, mlp, reports, hist = md.train_stagewise(fold, cfg)
    assert weights_equal(snapshots[0], snapshots[1]) and weights_equal(snapshots[1], cnn)
    assert set(reports) == {"cnn", "mlp"}
    assert [r.phase for r in hist] == ["cnn"] * 2 + ["mlp"] * 3


def test_end2end_zero_mlp_rate_matches_cnn_training():
    m, ol = small_fold()
    fold = md.prepare_fold(m, "train", "test", ol)
    cnn_cfg = TrainConfig(1e-3, 3, 5, 11)
    cfg = md.ExperimentConfig(cnn_cfg, TrainConfig(0.0, 3, 5, 12), mode="end2end", channels=SMALL)
    cnn, mlp, reports, hist = md.train_end2end(fold, cfg)
    ref, _ = md.train_cnn(fold.x_train, fold.y_train, cnn_cfg, SMALL)
    assert weights_equal(cnn, ref)
    assert weights_equal(mlp, md.MlpModel(cnn.feature_length + 9, seed=12))
    for rep in reports.values():
        assert rep.confusion.sum() == len(fold.y_test)
    assert {r.phase for r in hist} == {"cnn", "mlp"}


def test_end2end_shared_gradient_differs():
    m, ol = small_fold()
    fold = md.prepare_fold(m, "train", "test", ol)
    base = dict(cnn=TrainConfig(1e-3, 2, 8, 1), mlp=TrainConfig(1e-2, 2, 8, 2), mode="end2end", channels=SMALL)
    a = md.train_end2end(fold, md.ExperimentConfig(**base))[0]
    b = md.train_end2end(fold, md.ExperimentConfig(**base, shared_gradient=True))[0]
    assert not weights_equal(a, b)


def test_heads_output_simplices():
    m, ol = small_fold()
    fold = md.prepare_fold(m, "train", "test", ol)
    cnn = md.Cnn3lModel(SMALL, seed=0)
    mlp = md.MlpModel(cnn.feature_length + 9, seed=0)
    p = md.cnn_predict(cnn, fold.x_test)
    q = md.mlp_predict(mlp, md.fuse(md.extract_cnn_features(cnn, fold.x_test), fold.ol_test, fold.ol_stats))
    for probs in (p, q):
        assert probs.shape == (len(fold.y_test), 4)
        assert np.all(probs >= 0) and np.max(np.abs(probs.sum(axis=1) - 1)) < 1e-6


def test_fold_statistics_use_training_rows_only():
    m, ol = small_fold()
    fold = md.prepare_fold(m, "train", "test", ol)
    tr = m.indices("train")
    np.testing.assert_array_equal(fold.mean_image, m.patches[tr].astype(np.float64).mean(axis=0))
    np.testing.assert_array_equal(fold.ol_stats[0], ol[tr].mean(axis=0))


def test_sweep_cardinality_and_single_config():
    x, y = toy(12)
    xv, yv = toy(4, seed=1)
    cfg = TrainConfig(epochs=2, batch_size=6, seed=4)
    grid = [(d, lr) for d in (1, 2) for lr in (1e-3, 1e-4, 1e-5)]
    # shrink the sweep networks so the test stays fast
    rows = md.sweep(x, y, xv, yv, grid=grid, cfg=cfg, schedule=lambda d: SMALL[:d])
    assert len(rows) == len(grid) * 2
    assert len({r[0] for r in rows}) == len(grid)
    one = md.sweep(x, y, xv, yv, grid=[(2, 1e-4)], cfg=cfg, schedule=lambda d: SMALL[:d])
    _, hist = md.train_cnn(x, y, TrainConfig(1e-4, 2, 6, 4), SMALL[:2], val=(xv, yv))
    assert [(r[1], r[2], r[3]) for r in one] == [(h.epoch, h.accuracy, h.val_accuracy) for h in hist]


def test_checkpoint_roundtrip(tmp_path):
    cnn = md.Cnn3lModel(SMALL, seed=1)
    mlp = md.MlpModel(cnn.feature_length + 9, seed=2)
    md.save_checkpoint(tmp_path / "m.olck", cnn, mlp)
    c2, m2 = md.load_checkpoint(tmp_path / "m.olck")
    assert weights_equal(cnn, c2) and weights_equal(mlp, m2)
    assert c2.channels == SMALL
    raw = (tmp_path / "m.olck").read_bytes()
    assert raw[:4] == b"OLCK"
    (tmp_path / "bad.olck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        md.load_checkpoint(tmp_path / "bad.olck")
    (tmp_path / "short.olck").write_bytes(raw[:-7])
    with pytest.raises(FormatError):
        md.load_checkpoint(tmp_path / "short.olck")
    md.save_checkpoint(tmp_path / "c.olck", cnn)
    assert md.load_checkpoint(tmp_path / "c.olck")[1] is None


def test_history_csv_roundtrip(tmp_path):
    hist = [md.EpochRecord(1, "cnn", 1.25, 0.5), md.EpochRecord(1, "mlp", 0.1 + 0.2, 1 / 3)]
    md.write_history_csv(tmp_path / "log.csv", hist)
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,phase,loss,accuracy"
    assert md.read_history_csv(tmp_path / "log.csv") == hist
