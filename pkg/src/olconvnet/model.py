"""CNN and MLP assembly, feature fusion, and the three training regimes.

Network layout (channels-last, one 27x27x3 mean-subtracted patch per row)::

    conv 5x5 3->100 valid -> relu -> conv 3x3 100->50 same -> relu
    -> conv 3x3 50->100 same -> relu -> maxpool 2/1 -> [22*22*100 = 48,400]
    -> dense 48,400->4 -> softmax                      (CNN head)

    [48,400 CNN features | 9 z-scored OL features] = 48,409
    -> dense ->10 -> tansig -> dense 10->4 -> softmax  (MLP head)

Shallower or deeper conv stacks (1 to 4 layers) take a prefix of the channel
schedule ``(100, 50, 100)``, extended with 100 for depth 4. The first conv is
always 5x5 valid and later ones 3x3 same.

Training is minibatch SGD on the batch-mean cross-entropy. Each phase draws
from its own random streams derived from its seed: weight init, epoch
shuffling. So the CNN half of end-to-end training consumes exactly the same
random numbers as CNN-only training.

Checkpoint (``.olck``), little-endian::

    b"OLCK", u32 version (=1), u32 n_layers
    n_layers x layer record: u8 group (0 = cnn, 1 = mlp), u8 kind code,
        u8 padding (0 valid, 1 same), u8 reserved,
        u32 kernel_h, kernel_w, in_channels, out_channels, window, stride,
            in_dim, out_dim
    then for every conv/dense layer in table order: weights then bias,
        float32, C order

Epoch log CSV: ``epoch,phase,loss,accuracy`` (``phase`` is ``cnn`` or
``mlp``; loss and accuracy are training-set values accumulated over the
epoch's batches).
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nnkernel as nk
from .dataset import DatasetManifest, apply_mean_subtract, compute_mean_image
from .errors import ArgumentError, FormatError, StateError, TrainingError
from .metrics import MetricsReport, evaluate
from .nnkernel import LayerSpec, TrainConfig
from .olfeat import N_OL_FEATURES

log = logging.getLogger(__name__)

N_CLASSES = 4
INPUT_SHAPE = (27, 27, 3)
DEFAULT_CHANNELS = (100, 50, 100)
FEATURE_LENGTH = 48_400
CONV_PARAMS = 97_750
REPORTED_PARAMS = 118_000  # approximate total quoted for the reference network
HIDDEN = 10
POOL_WINDOW, POOL_STRIDE = 2, 1
EVAL_CHUNK = 128  # fixed so batched inference is reproducible
MODES = ("cnn_only", "stagewise", "end2end")


def channel_schedule(depth: int):
    if not 1 <= depth <= 4:
        raise ArgumentError("conv depth must be 1..4")
    return tuple((DEFAULT_CHANNELS + (100,))[:depth])


def _streams(seed):
    """Independent generators for weight init and epoch shuffling."""
    init, shuffle = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(shuffle)


class Cnn3lModel:
    """Conv stack + max-pool feature tap + dense softmax head."""

    def __init__(self, channels=DEFAULT_CHANNELS, seed=0, n_classes=N_CLASSES, init=True):
        channels = tuple(int(c) for c in channels)
        if not 1 <= len(channels) <= 4:
            raise ArgumentError("conv depth must be 1..4")
        self.channels = channels
        self.conv_specs = []
        cin, shape = INPUT_SHAPE[2], INPUT_SHAPE
        for i, cout in enumerate(channels):
            spec = LayerSpec.conv(5, 5, cin, cout, "valid") if i == 0 else LayerSpec.conv(3, 3, cin, cout, "same")
            self.conv_specs.append(spec)
            shape = spec.output_shape(shape)
            cin = cout
        self.pool_spec = LayerSpec.maxpool(POOL_WINDOW, POOL_STRIDE)
        self.feature_shape = self.pool_spec.output_shape(shape)
        self.feature_length = int(np.prod(self.feature_shape))
        self.head_spec = LayerSpec.dense(self.feature_length, n_classes)
        rng = _streams(seed)[0]
        self.params = []
        if init:
            for spec in self.conv_specs + [self.head_spec]:
                self.params.append(list(nk.glorot_uniform(rng, spec)))
        if channels == DEFAULT_CHANNELS:
            assert self.feature_length == FEATURE_LENGTH, self.feature_length
            assert self.conv_param_count == CONV_PARAMS, self.conv_param_count
            log.info(
                "CNN feature length %d, conv parameters %d, total parameters %d "
                "(the reference description quotes ~%d; kept as a known discrepancy)",
                self.feature_length, self.conv_param_count, self.param_count, REPORTED_PARAMS,
            )

    @property
    def layer_specs(self):
        """Full layer table; index of the max-pool entry is ``feature_tap``."""
        out = []
        for spec in self.conv_specs:
            out += [spec, LayerSpec("relu")]
        return out + [self.pool_spec, self.head_spec, LayerSpec("softmax")]

    @property
    def feature_tap(self):
        return 2 * len(self.conv_specs)

    @property
    def conv_param_count(self):
        return sum(int(np.prod(s.weight_shape)) + s.out_channels for s in self.conv_specs)

    @property
    def param_count(self):
        return self.conv_param_count + self.feature_length * self.head_spec.out_dim + self.head_spec.out_dim

    def copy(self):
        twin = Cnn3lModel.__new__(Cnn3lModel)
        twin.__dict__.update(self.__dict__)
        twin.params = [[w.copy(), b.copy()] for w, b in self.params]
        return twin

    def forward(self, x, keep=False):
        """Return ``(features [n, F], probs [n, k], cache)``."""
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1:] != INPUT_SHAPE:
            raise ArgumentError(f"expected patches [n, 27, 27, 3], got {x.shape}")
        cache = []
        h = x
        for spec, (w, b) in zip(self.conv_specs, self.params):
            if keep:
                z, cols = nk.conv2d_forward(h, spec, w, b, return_cols=True)
                cache.append((h, cols, z))
            else:
                z = nk.conv2d_forward(h, spec, w, b)
            h = nk.relu_forward(z)
        pooled, pidx = nk.maxpool_forward(h, POOL_WINDOW, POOL_STRIDE)
        feats = pooled.reshape(len(x), -1)
        w, b = self.params[-1]
        probs = nk.softmax(nk.dense_forward(feats, w, b))
        if keep:
            cache.append((pidx, feats))
        return feats, probs, cache

    def backward(self, cache, grad_scores, grad_features=None):
        """Gradients for every parameter pair, given d(loss)/d(scores).

        ``grad_features`` adds a gradient arriving at the feature tap from
        outside (used only by the shared-gradient end-to-end variant).
        """
        pidx, feats = cache[-1]
        w, _ = self.params[-1]
        g_feat, gw, gb = nk.dense_backward(feats, w, grad_scores)
        grads = [None] * len(self.params)
        grads[-1] = (gw, gb)
        if grad_features is not None:
            g_feat = g_feat + grad_features.astype(g_feat.dtype, copy=False)
        g = nk.maxpool_backward(pidx, g_feat.reshape(pidx.index.shape))
        for i in range(len(self.conv_specs) - 1, -1, -1):
            h, cols, z = cache[i]
            g = nk.relu_backward(z, g)
            gx, gw, gb = nk.conv2d_backward(h, self.conv_specs[i], self.params[i][0], g, cols=cols)
            grads[i] = (gw, gb)
            g = gx
        return grads


class MlpModel:
    """dense in->10, tansig, dense 10->4, softmax."""

    def __init__(self, in_dim=FEATURE_LENGTH + N_OL_FEATURES, seed=0, n_classes=N_CLASSES, hidden=HIDDEN,
                 init=True):
        self.specs = [LayerSpec.dense(in_dim, hidden), LayerSpec("tansig"),
                      LayerSpec.dense(hidden, n_classes), LayerSpec("softmax")]
        rng = _streams(seed)[0]
        self.params = [list(nk.glorot_uniform(rng, s)) for s in (self.specs[0], self.specs[2])] if init else []

    @property
    def in_dim(self):
        return self.specs[0].in_dim

    def copy(self):
        twin = MlpModel.__new__(MlpModel)
        twin.specs = list(self.specs)
        twin.params = [[w.copy(), b.copy()] for w, b in self.params]
        return twin

    def forward(self, x):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ArgumentError(f"expected fused rows [n, {self.in_dim}], got {x.shape}")
        (w1, b1), (w2, b2) = self.params
        hid = nk.tansig(nk.dense_forward(x, w1, b1))
        probs = nk.softmax(nk.dense_forward(hid, w2, b2))
        return probs, (x, hid)

    def backward(self, cache, grad_scores, need_input=False):
        x, hid = cache
        (w1, _), (w2, _) = self.params
        g_hid, gw2, gb2 = nk.dense_backward(hid, w2, grad_scores)
        g_pre = nk.tansig_backward(hid, g_hid)
        if need_input:
            gx, gw1, gb1 = nk.dense_backward(x, w1, g_pre)
        else:
            gw1, gb1, gx = x.T @ g_pre, g_pre.sum(axis=0, dtype=np.float64).astype(g_pre.dtype), None
        return [(gw1, gb1), (gw2, gb2)], gx


def _apply(params, grads, lr):
    for pair, (gw, gb) in zip(params, grads):
        pair[0] = nk.sgd_step(pair[0], gw, lr)
        pair[1] = nk.sgd_step(pair[1], gb, lr)


# features and fusion

def extract_cnn_features(model: Cnn3lModel, patches, chunk=EVAL_CHUNK):
    """Flattened post-pool activations, ``[n, feature_length]`` float32."""
    x = np.asarray(patches, dtype=np.float32)
    out = np.empty((len(x), model.feature_length), dtype=np.float32)
    for s in range(0, len(x), chunk):
        out[s:s + chunk] = model.forward(x[s:s + chunk])[0]
    return out


def cnn_predict(model: Cnn3lModel, patches, chunk=EVAL_CHUNK):
    x = np.asarray(patches, dtype=np.float32)
    out = np.empty((len(x), model.head_spec.out_dim), dtype=np.float32)
    for s in range(0, len(x), chunk):
        out[s:s + chunk] = model.forward(x[s:s + chunk])[1]
    return out


def ol_statistics(ol):
    """Per-feature mean and population standard deviation (float64)."""
    ol = np.asarray(ol, dtype=np.float64)
    if ol.ndim != 2 or ol.shape[1] != N_OL_FEATURES or not len(ol):
        raise ArgumentError(f"expected [n >= 1, {N_OL_FEATURES}] OL features")
    return ol.mean(axis=0), ol.std(axis=0)


def zscore_ol(ol, ol_stats):
    mean, std = ol_stats
    ol = np.asarray(ol, dtype=np.float64)
    ok = std >= 1e-12
    safe = np.where(ok, std, 1.0)
    return np.where(ok, (ol - mean) / safe, 0.0)


def fuse(cnn_features, ol, ol_stats, use_ol=True):
    """CNN block followed by the 9 z-scored OL values.

    Works on a single row or a batch. With ``use_ol`` off the OL block is
    zero, so the classifier input keeps its width.
    """
    f = np.asarray(cnn_features, dtype=np.float32)
    z = zscore_ol(ol, ol_stats).astype(np.float32)
    if not use_ol:
        z = np.zeros_like(z)
    if f.ndim == 1:
        return np.concatenate([f, z.reshape(-1)])
    return np.concatenate([f, z.reshape(len(f), -1)], axis=1)


# training

@dataclass
class EpochRecord:
    epoch: int
    phase: str
    loss: float
    accuracy: float
    val_accuracy: float = math.nan


def _check_loss(loss, epoch, batch, phase):
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite {phase} loss", epoch=epoch, batch=batch)


def _batch_slices(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]


def _head_grad(probs, labels):
    losses = nk.cross_entropy(probs, labels)
    return losses, nk.cross_entropy_grad(probs, labels) / len(labels)


class _Tally:
    def __init__(self):
        self.loss = 0.0
        self.hits = 0
        self.n = 0

    def add(self, losses, probs, labels):
        self.loss += math.fsum(losses)
        self.hits += int(np.sum(probs.argmax(axis=1) + 1 == labels))
        self.n += len(labels)

    def record(self, epoch, phase, val_accuracy=math.nan):
        return EpochRecord(epoch, phase, self.loss / self.n, self.hits / self.n, val_accuracy)


def _cnn_step(model, xb, yb, lr, epoch, batch):
    _, probs, cache = model.forward(xb, keep=True)
    losses, g = _head_grad(probs, yb)
    _check_loss(losses.mean(), epoch, batch, "cnn")
    _apply(model.params, model.backward(cache, g), lr)
    return losses, probs


def _accuracy(probs, labels):
    return float(np.mean(probs.argmax(axis=1) + 1 == labels)) if len(labels) else math.nan


def train_cnn(x, y, cfg: TrainConfig = TrainConfig(), channels=DEFAULT_CHANNELS, val=None, model=None):
    """Minibatch SGD for the CNN head. ``x`` is mean-subtracted patches.

    ``val = (x_val, y_val)`` adds a validation accuracy to every epoch record.
    Returns ``(model, log)``.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y) or not len(y):
        raise ArgumentError("need one label per training patch")
    model = Cnn3lModel(channels, seed=cfg.seed) if model is None else model
    shuffle = _streams(cfg.seed)[1]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        tally = _Tally()
        for bi, idx in enumerate(_batch_slices(len(y), cfg.batch_size, shuffle), 1):
            losses, probs = _cnn_step(model, x[idx], y[idx], cfg.learning_rate, epoch, bi)
            tally.add(losses, probs, y[idx])
        va = _accuracy(cnn_predict(model, val[0]), np.asarray(val[1])) if val is not None else math.nan
        history.append(tally.record(epoch, "cnn", va))
        log.debug("cnn epoch %d loss %.4f acc %.4f", epoch, history[-1].loss, history[-1].accuracy)
    return model, history


def train_mlp(fused, y, cfg: TrainConfig = TrainConfig(), model=None):
    fused = np.asarray(fused, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    model = MlpModel(fused.shape[1], seed=cfg.seed) if model is None else model
    shuffle = _streams(cfg.seed)[1]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        tally = _Tally()
        for bi, idx in enumerate(_batch_slices(len(y), cfg.batch_size, shuffle), 1):
            probs, cache = model.forward(fused[idx])
            losses, g = _head_grad(probs, y[idx])
            _check_loss(losses.mean(), epoch, bi, "mlp")
            _apply(model.params, model.backward(cache, g)[0], cfg.learning_rate)
            tally.add(losses, probs, y[idx])
        history.append(tally.record(epoch, "mlp"))
    return model, history


def mlp_predict(model: MlpModel, fused, chunk=EVAL_CHUNK):
    fused = np.asarray(fused, dtype=np.float32)
    return np.concatenate([model.forward(fused[s:s + chunk])[0] for s in range(0, len(fused), chunk)])


@dataclass
class ExperimentConfig:
    cnn: TrainConfig = field(default_factory=TrainConfig)
    mlp: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "stagewise"
    branch_switch: bool = True  # True: OL branch feeds the fusion layer
    channels: tuple = DEFAULT_CHANNELS
    shared_gradient: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ArgumentError(f"mode must be one of {MODES}")
        self.channels = tuple(int(c) for c in self.channels)
        if not 1 <= len(self.channels) <= 4:
            raise ArgumentError("channel schedule must list 1..4 conv layers")
        if self.shared_gradient and self.mode != "end2end":
            raise ArgumentError("shared_gradient only applies to end2end mode")


@dataclass
class FoldData:
    """Normalized tensors for one train/test pairing."""

    x_train: np.ndarray
    y_train: np.ndarray
    ol_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    ol_test: np.ndarray
    mean_image: np.ndarray
    ol_stats: tuple


def prepare_fold(manifest: DatasetManifest, train_split, test_split, ol_features):
    """Mean image and OL statistics come from the training split only."""
    tr, te = manifest.indices(train_split), manifest.indices(test_split)
    if not len(tr) or not len(te):
        raise StateError(f"empty split: {train_split}={len(tr)} {test_split}={len(te)}")
    ol = np.asarray(ol_features, dtype=np.float64)
    if ol.shape != (len(manifest), N_OL_FEATURES):
        raise ArgumentError(f"OL features must be [{len(manifest)}, {N_OL_FEATURES}]")
    mean = compute_mean_image(manifest, indices=tr)
    labels = manifest.labels
    return FoldData(
        apply_mean_subtract(manifest.patches[tr], mean), labels[tr], ol[tr],
        apply_mean_subtract(manifest.patches[te], mean), labels[te], ol[te],
        mean, ol_statistics(ol[tr]),
    )


def train_stagewise(fold: FoldData, cfg: ExperimentConfig):
    """CNN first, then frozen features + OL into the MLP.

    Returns ``(cnn, mlp, reports, history)`` with reports for both heads.
    """
    cnn, hist = train_cnn(fold.x_train, fold.y_train, cfg.cnn, cfg.channels)
    fused = fuse(extract_cnn_features(cnn, fold.x_train), fold.ol_train, fold.ol_stats, cfg.branch_switch)
    mlp, mhist = train_mlp(fused, fold.y_train, cfg.mlp)
    return cnn, mlp, evaluate_heads(cnn, mlp, fold, cfg.branch_switch), hist + mhist


def train_end2end(fold: FoldData, cfg: ExperimentConfig):
    """Interleaved per-batch updates: CNN from its own loss, then the MLP on
    features re-extracted from the just-updated CNN. Both heads share the
    CNN's batch order and epoch count; the MLP learning rate is its own.

    With ``shared_gradient`` the MLP loss gradient is also routed back into
    the CNN and both models update from one forward pass.
    """
    x, y = fold.x_train, fold.y_train
    cnn = Cnn3lModel(cfg.channels, seed=cfg.cnn.seed)
    mlp = MlpModel(cnn.feature_length + N_OL_FEATURES, seed=cfg.mlp.seed)
    shuffle = _streams(cfg.cnn.seed)[1]
    z_ol = fuse(np.zeros((len(y), 0), np.float32), fold.ol_train, fold.ol_stats, cfg.branch_switch)
    history = []
    for epoch in range(1, cfg.cnn.epochs + 1):
        tc, tm = _Tally(), _Tally()
        for bi, idx in enumerate(_batch_slices(len(y), cfg.cnn.batch_size, shuffle), 1):
            yb = y[idx]
            if cfg.shared_gradient:
                feats, probs, cache = cnn.forward(x[idx], keep=True)
                losses, g = _head_grad(probs, yb)
                _check_loss(losses.mean(), epoch, bi, "cnn")
                mprobs, mcache = mlp.forward(np.concatenate([feats, z_ol[idx]], axis=1))
                mlosses, mg = _head_grad(mprobs, yb)
                _check_loss(mlosses.mean(), epoch, bi, "mlp")
                mgrads, gx = mlp.backward(mcache, mg, need_input=True)
                _apply(cnn.params, cnn.backward(cache, g, gx[:, :cnn.feature_length]), cfg.cnn.learning_rate)
                _apply(mlp.params, mgrads, cfg.mlp.learning_rate)
            else:
                losses, probs = _cnn_step(cnn, x[idx], yb, cfg.cnn.learning_rate, epoch, bi)
                feats = cnn.forward(x[idx])[0]
                mprobs, mcache = mlp.forward(np.concatenate([feats, z_ol[idx]], axis=1))
                mlosses, mg = _head_grad(mprobs, yb)
                _check_loss(mlosses.mean(), epoch, bi, "mlp")
                _apply(mlp.params, mlp.backward(mcache, mg)[0], cfg.mlp.learning_rate)
            tc.add(losses, probs, yb)
            tm.add(mlosses, mprobs, yb)
        history += [tc.record(epoch, "cnn"), tm.record(epoch, "mlp")]
    return cnn, mlp, evaluate_heads(cnn, mlp, fold, cfg.branch_switch), history


def evaluate_heads(cnn, mlp, fold: FoldData, use_ol=True):
    """Test-split reports keyed ``cnn`` (and ``mlp`` when given)."""
    feats = extract_cnn_features(cnn, fold.x_test)
    w, b = cnn.params[-1]
    # same arithmetic as the forward pass, chunked identically
    probs = np.concatenate([nk.softmax(nk.dense_forward(feats[s:s + EVAL_CHUNK], w, b))
                            for s in range(0, len(feats), EVAL_CHUNK)])
    reports = {"cnn": evaluate(probs, fold.y_test)}
    if mlp is not None:
        fused = fuse(feats, fold.ol_test, fold.ol_stats, use_ol)
        reports["mlp"] = evaluate(mlp_predict(mlp, fused), fold.y_test)
    return reports


@dataclass
class ExperimentResult:
    cnn: Cnn3lModel
    mlp: MlpModel | None
    reports: dict
    history: list
    mean_image: np.ndarray
    ol_stats: tuple


def run_experiment(manifest: DatasetManifest, cfg: ExperimentConfig, train_split="train", test_split="test",
                   ol_features=None) -> ExperimentResult:
    if ol_features is None:
        from .olfeat import extract_ol_batch

        ol_features = extract_ol_batch(manifest.patches)[0]
    fold = prepare_fold(manifest, train_split, test_split, ol_features)
    if cfg.mode == "cnn_only":
        cnn, hist = train_cnn(fold.x_train, fold.y_train, cfg.cnn, cfg.channels)
        mlp, reports = None, evaluate_heads(cnn, None, fold)
    elif cfg.mode == "stagewise":
        cnn, mlp, reports, hist = train_stagewise(fold, cfg)
    else:
        cnn, mlp, reports, hist = train_end2end(fold, cfg)
    return ExperimentResult(cnn, mlp, reports, hist, fold.mean_image, fold.ol_stats)


# hyperparameter sweep

SWEEP_DEPTHS = (1, 2, 3, 4)
SWEEP_RATES = (1e-3, 1e-4, 1e-5)


def sweep_label(depth, lr):
    return f"{depth}C1FC_lr{lr:g}"


def sweep(x_train, y_train, x_val, y_val, grid=None, cfg: TrainConfig = TrainConfig(), schedule=channel_schedule):
    """Train one CNN per ``(depth, learning_rate)`` and tabulate accuracy per
    epoch. Returns rows ``(config, epoch, train_acc, val_acc)``. ``schedule``
    maps a depth to its channel tuple."""
    if grid is None:
        grid = [(d, lr) for d in SWEEP_DEPTHS for lr in SWEEP_RATES]
    rows = []
    for depth, lr in grid:
        run_cfg = TrainConfig(lr, cfg.epochs, cfg.batch_size, cfg.seed)
        _, hist = train_cnn(x_train, y_train, run_cfg, schedule(depth), val=(x_val, y_val))
        rows += [(sweep_label(depth, lr), r.epoch, r.accuracy, r.val_accuracy) for r in hist]
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "epoch", "train_acc", "val_acc"])
        for cfg_name, epoch, tr, va in rows:
            w.writerow([cfg_name, epoch, repr(float(tr)), repr(float(va))])


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "phase", "loss", "accuracy"])
        for r in history:
            w.writerow([r.epoch, r.phase, repr(float(r.loss)), repr(float(r.accuracy))])


def read_history_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), r["phase"], float(r["loss"]), float(r["accuracy"])) for r in rows]


# checkpoints

MAGIC = b"OLCK"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_LAYER = struct.Struct("<BBBB8I")
_KIND = {k: i for i, k in enumerate(nk.LAYER_KINDS)}


def save_checkpoint(path, cnn: Cnn3lModel, mlp: MlpModel | None = None):
    table = [(0, s) for s in cnn.layer_specs]
    if mlp is not None:
        table += [(1, s) for s in mlp.specs]
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(table)))
        for group, s in table:
            fh.write(_LAYER.pack(group, _KIND[s.kind], int(s.padding == "same"), 0, s.kernel_h, s.kernel_w,
                                 s.in_channels, s.out_channels, s.window, s.stride, s.in_dim, s.out_dim))
        for model in (cnn, mlp):
            if model is None:
                continue
            for w, b in model.params:
                fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return ``(cnn, mlp_or_None)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, n = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = _HEAD.size
    groups = {0: [], 1: []}
    kinds = nk.LAYER_KINDS
    try:
        for _ in range(n):
            g, k, pad, _, *nums = _LAYER.unpack_from(data, pos)
            pos += _LAYER.size
            kh, kw, cin, cout, win, stride, din, dout = nums
            groups[g].append(LayerSpec(kinds[k], kh, kw, cin, cout, "same" if pad else "valid", win, stride, din,
                                       dout))
    except (struct.error, IndexError, KeyError) as exc:
        raise FormatError(f"{path}: corrupt layer table ({exc})") from exc

    def read_params(specs):
        nonlocal pos
        params = []
        for s in specs:
            if s.weight_shape is None:
                continue
            pair = []
            for shape in (s.weight_shape, s.bias_shape):
                count = int(np.prod(shape))
                if pos + 4 * count > len(data):
                    raise FormatError(f"{path}: truncated weight data")
                pair.append(np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32)
                            .reshape(shape))
                pos += 4 * count
            params.append(pair)
        return params

    convs = [s for s in groups[0] if s.kind == "conv"]
    cnn = Cnn3lModel([s.out_channels for s in convs], init=False)
    if cnn.layer_specs != groups[0]:
        raise FormatError(f"{path}: layer table does not describe a supported CNN")
    cnn.params = read_params(groups[0])
    mlp = None
    if groups[1]:
        mlp = MlpModel(groups[1][0].in_dim, hidden=groups[1][0].out_dim, n_classes=groups[1][2].out_dim, init=False)
        if mlp.specs != groups[1]:
            raise FormatError(f"{path}: layer table does not describe a supported MLP")
        mlp.params = read_params(groups[1])
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return cnn, mlp


def save_normalization(path, mean_image, ol_stats):
    np.savez(path, mean_image=mean_image, ol_mean=ol_stats[0], ol_std=ol_stats[1])


def load_normalization(path):
    with np.load(path) as z:
        return z["mean_image"], (z["ol_mean"], z["ol_std"])


def report_for(reports: dict, head: str) -> MetricsReport:
    if head not in reports:
        raise StateError(f"no report for head {head!r}")
    return reports[head]
