"""Command-line entry point.

Every subcommand reads one flat ``key=value`` config file (``--config``,
``#`` comments allowed) and lets ``--<key>`` flags override single entries.
Unknown keys are rejected. Randomized steps refuse to run without ``seed``.

Each output directory gets a ``run.manifest``::

    format=olconvnet-run/1
    command=<subcommand>
    config_hash=<sha256 of the sorted key=value lines below>
    seed=<seed or none>
    version.olconvnet=... version.numpy=... version.python=...
    [config]
    key=value ...
    [inputs]
    path,sha256,bytes ...

Exit codes: 0 success, 1 validation error, 2 runtime error. Failures print a
message and a final ``error=<kind> code=<n> message=<text>`` line on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as ds
from . import model as md
from .adasyn import BalanceConfig
from .errors import ArgumentError, OlConvNetError, ParseError
from .nnkernel import TrainConfig

log = logging.getLogger("olconvnet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ArgumentError):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return v


def _floats(text):
    return tuple(float(t) for t in str(text).split(","))


def _ints(text):
    return tuple(int(t) for t in str(text).split(","))


def _split_spec(text):
    t = str(text).strip()
    if t == "2fold":
        return t
    r = _floats(t)
    if len(r) != 3:
        raise ValueError("split is 'train,val,test' ratios or '2fold'")
    return r


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    help: str


KEYS = [
    Key("data_dir", str, None, "directory of <image_id>.png files (ingest)"),
    Key("gt_csv", str, None, "ground-truth CSV image_id,x,y,class_id (ingest)"),
    Key("out_dir", str, None, "output directory (all subcommands)"),
    Key("manifest", str, None, "dataset.manifest (or its directory) to read"),
    Key("features", str, None, "object-level feature CSV; computed on the fly if unset"),
    Key("model_dir", str, None, "directory holding model.olck and normalization.npz (evaluate, roc-export)"),
    Key("debug_dir", str, None, "segment: write per-stage PNGs here"),
    Key("seed", _seed, None, "random seed; required by every randomized step"),
    Key("n_per_class", int, 400, "synth-gen: patches per class"),
    Key("balance", _bool, True, "balance: run ADASYN oversampling"),
    Key("balance_after_split", _bool, False, "balance: split first, then oversample training partitions only"),
    Key("adasyn_k", int, 5, "ADASYN neighbour count"),
    Key("adasyn_beta", float, 1.0, "ADASYN balance level in (0, 1]"),
    Key("adasyn_d_th", float, 0.75, "ADASYN imbalance-ratio threshold in (0, 1]"),
    Key("split", _split_spec, (0.7, 0.15, 0.15), "train,val,test ratios or 2fold"),
    Key("mode", str, None, "training mode: cnn_only, stagewise or end2end (set by the train-* subcommands)"),
    Key("cnn_lr", float, 1e-4, "CNN learning rate"),
    Key("cnn_epochs", int, 100, "CNN epochs"),
    Key("cnn_batch", int, 64, "CNN batch size"),
    Key("mlp_lr", float, 1e-4, "MLP learning rate"),
    Key("mlp_epochs", int, 100, "MLP epochs"),
    Key("mlp_batch", int, 64, "MLP batch size"),
    Key("channels", _ints, md.DEFAULT_CHANNELS, "conv channel schedule, 1 to 4 comma-separated counts"),
    Key("branch_switch", _bool, True, "feed object-level features into the MLP"),
    Key("shared_gradient", _bool, False, "end2end: route the MLP loss gradient into the CNN"),
    Key("sweep_depths", _ints, md.SWEEP_DEPTHS, "sweep: conv depths"),
    Key("sweep_rates", _floats, md.SWEEP_RATES, "sweep: learning rates"),
    Key("eval_split", str, "test", "evaluate/roc-export: split to score"),
    Key("head", str, "mlp", "roc-export: output head, cnn or mlp"),
]
KEY_INDEX = {k.name: k for k in KEYS}


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_config_file(path):
    raw = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{path}: expected key=value", line=no)
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KEY_INDEX:
            raise ConfigError(f"{path}:{no}: unknown config key {k!r}")
        raw[k] = v
    return raw


def resolve_config(raw, overrides):
    """Defaults < config file < flags. Returns parsed values by key."""
    merged = dict(raw)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    cfg = {}
    for key in KEYS:
        if key.name in merged:
            try:
                cfg[key.name] = key.parse(merged[key.name])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key.name}: {exc}") from None
        else:
            cfg[key.name] = key.default
    return cfg


def config_text(cfg):
    return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(cfg.items()) if v is not None)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_run_manifest(out_dir, command, cfg, inputs):
    text = config_text(cfg)
    lines = [
        "format=olconvnet-run/1",
        f"command={command}",
        f"config_hash={hashlib.sha256(text.encode()).hexdigest()}",
        f"seed={cfg['seed'] if cfg.get('seed') is not None else 'none'}",
        f"version.olconvnet={__version__}",
        f"version.numpy={np.__version__}",
        f"version.python={platform.python_version()}",
        "[config]",
    ]
    lines += text.splitlines()
    lines += ["[inputs]", "path,sha256,bytes"]
    for p in sorted({str(Path(p)) for p in inputs}):
        lines.append(f"{p},{_sha256(p)},{os.path.getsize(p)}")
    (Path(out_dir) / "run.manifest").write_text("\n".join(lines) + "\n")


class OutDirLock:
    """Exclusive ``.lock`` file so two commands never write one directory."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OlConvNetError(f"{self.path.parent} is locked by another run ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# helpers shared by subcommands

def _require(cfg, *names):
    missing = [n for n in names if cfg.get(n) is None]
    if missing:
        raise ConfigError("missing required config key(s): " + ", ".join(missing))


def _existing(cfg, *names):
    for n in names:
        if cfg.get(n) is not None and not Path(cfg[n]).exists():
            raise ConfigError(f"{n}: path does not exist: {cfg[n]}")


def _manifest_path(cfg):
    p = Path(cfg["manifest"])
    return p / "dataset.manifest" if p.is_dir() else p


def _ol_features(cfg, manifest, inputs):
    if cfg["features"] is None:
        from .olfeat import extract_ol_batch

        return extract_ol_batch(manifest.patches)[0]
    ids, _, feats = ds.read_feature_csv(cfg["features"])
    if ids != [s.sample_id for s in manifest.samples]:
        raise OlConvNetError("feature CSV rows do not match the manifest sample order")
    inputs.append(cfg["features"])
    return feats


def _experiment_config(cfg, mode):
    seed = cfg["seed"]
    return md.ExperimentConfig(
        cnn=TrainConfig(cfg["cnn_lr"], cfg["cnn_epochs"], cfg["cnn_batch"], seed),
        mlp=TrainConfig(cfg["mlp_lr"], cfg["mlp_epochs"], cfg["mlp_batch"], (seed + 1) % 2**64),
        mode=mode, branch_switch=cfg["branch_switch"], channels=cfg["channels"],
        shared_gradient=cfg["shared_gradient"],
    )


def _write_reports(out, reports, suffix=""):
    for head, rep in reports.items():
        (out / f"report_{head}{suffix}.txt").write_text(rep.to_text())


# subcommands

def cmd_synth_gen(cfg, out, inputs):
    from .synth import synth_generate

    _require(cfg, "seed")
    samples = synth_generate(cfg["n_per_class"], cfg["seed"], out)
    print(f"wrote {len(samples)} synthetic patches to {out}")


def cmd_ingest(cfg, out, inputs):
    _require(cfg, "data_dir", "gt_csv")
    inputs.append(cfg["gt_csv"])
    m = ds.ingest(cfg["data_dir"], cfg["gt_csv"])
    ds.write_manifest(m, out)
    print(f"ingested {len(m)} patches; class counts {m.class_counts}")


def cmd_balance(cfg, out, inputs):
    """Assign splits and oversample minority classes."""
    _require(cfg, "manifest", "seed")
    m = _load_manifest(cfg, inputs)
    bcfg = BalanceConfig(cfg["adasyn_k"], cfg["adasyn_beta"], cfg["adasyn_d_th"], cfg["seed"])
    two_fold = cfg["split"] == "2fold"

    def do_split(x):
        return ds.split_2fold(x, cfg["seed"]) if two_fold else ds.split(x, cfg["split"], cfg["seed"])

    if not cfg["balance"]:
        m = do_split(m)
    elif cfg["balance_after_split"]:
        m = do_split(m)
        for part in (("fold1", "fold2") if two_fold else ("train",)):
            m = ds.balance_dataset(m, bcfg, only_split=part)
    else:
        m = do_split(ds.balance_dataset(m, bcfg))
    ds.write_manifest(m, out)
    n_syn = sum(s.synthetic for s in m.samples)
    print(f"{len(m)} samples ({n_syn} synthetic); class counts {m.class_counts}")


def cmd_segment(cfg, out, inputs):
    from .errors import NoForeground
    from .segmenter import dump_stages, segment

    _require(cfg, "manifest")
    m = _load_manifest(cfg, inputs)
    rows = ["sample_id,label,segmented,area,component_pixels"]
    for s, patch in zip(m.samples, m.patches):
        try:
            seg = segment(patch, keep_stages=cfg["debug_dir"] is not None)
        except NoForeground:
            rows.append(f"{s.sample_id},{s.label},0,0,0")
            continue
        rows.append(f"{s.sample_id},{s.label},1,{seg.mask.area},{seg.mask.component_pixels}")
        if cfg["debug_dir"] is not None:
            dump_stages(seg, cfg["debug_dir"], prefix=s.sample_id.replace("/", "_"))
    (out / "segmentation.csv").write_text("\n".join(rows) + "\n")
    print(f"segmented {sum(r.split(',')[2] == '1' for r in rows[1:])} of {len(m)} patches")


def cmd_features(cfg, out, inputs):
    from .olfeat import extract_ol_batch

    _require(cfg, "manifest")
    m = _load_manifest(cfg, inputs)
    feats, degenerate = extract_ol_batch(m.patches)
    ds.write_feature_csv(out / "ol_features.csv", [s.sample_id for s in m.samples], m.labels, feats)
    if cfg["model_dir"] is not None:
        cnn, _ = md.load_checkpoint(Path(cfg["model_dir"]) / "model.olck")
        mean, _ = md.load_normalization(Path(cfg["model_dir"]) / "normalization.npz")
        inputs += [Path(cfg["model_dir"]) / "model.olck", Path(cfg["model_dir"]) / "normalization.npz"]
        x = ds.apply_mean_subtract(m.patches, mean)
        ds.write_cnn_features(out / "cnn_features.olcv", md.extract_cnn_features(cnn, x))
    print(f"object-level features for {len(m)} patches ({int(degenerate.sum())} without a nucleus)")


def _load_manifest(cfg, inputs):
    path = _manifest_path(cfg)
    m = ds.read_manifest(path)
    inputs.append(path)
    inputs.append(path.parent / "patches.npy")
    return m


def _train(cfg, out, inputs, mode):
    _require(cfg, "manifest", "seed")
    if cfg["mode"] is not None and cfg["mode"] != mode:
        raise ConfigError(f"mode={cfg['mode']} conflicts with this subcommand ({mode})")
    m = _load_manifest(cfg, inputs)
    ol = _ol_features(cfg, m, inputs)
    ecfg = _experiment_config(cfg, mode)
    splits = {s.split for s in m.samples}
    if {"fold1", "fold2"} <= splits:
        from .metrics import crossval_2fold

        averaged, folds = crossval_2fold(m, ecfg, ol_features=ol)
        for i, f in enumerate(folds, 1):
            _write_reports(out, f.reports, f"_fold{i}")
        _write_reports(out, averaged)
        reports = averaged
    elif {"train", "test"} <= splits:
        res = md.run_experiment(m, ecfg, "train", "test", ol_features=ol)
        md.save_checkpoint(out / "model.olck", res.cnn, res.mlp)
        md.save_normalization(out / "normalization.npz", res.mean_image, res.ol_stats)
        md.write_history_csv(out / "history.csv", res.history)
        _write_reports(out, res.reports)
        reports = res.reports
    else:
        raise OlConvNetError("manifest has no train/test or fold1/fold2 tags; run 'balance' first")
    for head, rep in reports.items():
        print(f"{head}: macro_f1={rep.macro_f1:.4f} auc_macro={rep.auc_macro:.4f} loss={rep.mean_loss:.4f}")


def cmd_train_cnn(cfg, out, inputs):
    _train(cfg, out, inputs, "cnn_only")


def cmd_train_stagewise(cfg, out, inputs):
    _train(cfg, out, inputs, "stagewise")


def cmd_train_e2e(cfg, out, inputs):
    _train(cfg, out, inputs, "end2end")


def cmd_sweep(cfg, out, inputs):
    _require(cfg, "manifest", "seed")
    m = _load_manifest(cfg, inputs)
    tr, va = m.indices("train"), m.indices("val")
    if not len(tr) or not len(va):
        raise OlConvNetError("sweep needs train and val splits")
    mean = ds.compute_mean_image(m, indices=tr)
    grid = [(d, lr) for d in cfg["sweep_depths"] for lr in cfg["sweep_rates"]]
    for d, _ in grid:
        md.channel_schedule(d)
    rows = md.sweep(ds.apply_mean_subtract(m.patches[tr], mean), m.labels[tr],
                    ds.apply_mean_subtract(m.patches[va], mean), m.labels[va], grid,
                    TrainConfig(cfg["cnn_lr"], cfg["cnn_epochs"], cfg["cnn_batch"], cfg["seed"]))
    md.write_sweep_csv(out / "sweep.csv", rows)
    print(f"sweep: {len(grid)} configs, {len(rows)} rows")


def _score(cfg, inputs):
    _require(cfg, "manifest", "model_dir")
    m = _load_manifest(cfg, inputs)
    mdir = Path(cfg["model_dir"])
    ck, norm = mdir / "model.olck", mdir / "normalization.npz"
    for p in (ck, norm):
        if not p.exists():
            raise ConfigError(f"model_dir lacks {p.name}")
    inputs += [ck, norm]
    cnn, mlp = md.load_checkpoint(ck)
    mean, ol_stats = md.load_normalization(norm)
    idx = m.indices(cfg["eval_split"])
    if not len(idx):
        raise OlConvNetError(f"split {cfg['eval_split']!r} is empty")
    ol = _ol_features(cfg, m, inputs) if mlp is not None else np.zeros((len(m), 9))
    fold = md.FoldData(None, None, None, ds.apply_mean_subtract(m.patches[idx], mean), m.labels[idx], ol[idx],
                       mean, ol_stats)
    return cnn, mlp, fold


def cmd_evaluate(cfg, out, inputs):
    cnn, mlp, fold = _score(cfg, inputs)
    reports = md.evaluate_heads(cnn, mlp, fold, cfg["branch_switch"])
    _write_reports(out, reports)
    for head, rep in reports.items():
        print(f"{head}: macro_f1={rep.macro_f1:.4f} auc_macro={rep.auc_macro:.4f} loss={rep.mean_loss:.4f}")


def cmd_roc_export(cfg, out, inputs):
    from .metrics import roc_auc, write_roc_csv

    if cfg["head"] not in ("cnn", "mlp"):
        raise ConfigError("head must be cnn or mlp")
    cnn, mlp, fold = _score(cfg, inputs)
    feats = md.extract_cnn_features(cnn, fold.x_test)
    if cfg["head"] == "cnn":
        probs = md.cnn_predict(cnn, fold.x_test)
    else:
        if mlp is None:
            raise OlConvNetError("checkpoint holds no MLP head")
        probs = md.mlp_predict(mlp, md.fuse(feats, fold.ol_test, fold.ol_stats, cfg["branch_switch"]))
    curves, *_ = roc_auc(probs, fold.y_test)
    n = write_roc_csv(out / f"roc_{cfg['head']}.csv", curves)
    print(f"wrote {n} ROC points")


COMMANDS = {
    "synth-gen": (cmd_synth_gen, "generate a synthetic labelled patch set"),
    "ingest": (cmd_ingest, "cut 27x27 patches from images + ground-truth CSV"),
    "balance": (cmd_balance, "assign splits and oversample minority classes (ADASYN)"),
    "segment": (cmd_segment, "segment every patch; optional per-stage debug images"),
    "features": (cmd_features, "object-level features (and CNN features with model_dir)"),
    "train-cnn": (cmd_train_cnn, "train the CNN head only"),
    "train-stagewise": (cmd_train_stagewise, "train CNN, freeze, then train the fused MLP"),
    "train-e2e": (cmd_train_e2e, "interleaved CNN and MLP training"),
    "sweep": (cmd_sweep, "accuracy-vs-epoch table over conv depth and learning rate"),
    "evaluate": (cmd_evaluate, "score a saved model on one split"),
    "roc-export": (cmd_roc_export, "write per-class ROC points as CSV"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="olconvnet", description="Hybrid nucleus classification pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text,
                           epilog="Every option is also a config-file key (underscores, key=value).")
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        for key in KEYS:
            default = "none" if key.default is None else _fmt(key.default)
            p.add_argument(f"--{key.name.replace('_', '-')}", dest=key.name, default=None, metavar="VALUE",
                           help=f"{key.help} (key {key.name}, default {default})")
    return parser


def _fail(code, exc):
    msg = " ".join(str(exc).split())
    print(f"olconvnet: {msg}", file=sys.stderr)
    print(f"error={type(exc).__name__} code={code} message={msg}", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(None if argv is None else [str(a) for a in argv])
    except SystemExit as exc:
        # argparse exits 2 on usage errors; usage problems are validation errors here
        if exc.code == 0:
            return EXIT_OK
        print(f"error=UsageError code={EXIT_VALIDATION} message=invalid command line", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {k.name: getattr(args, k.name) for k in KEYS}
    try:
        raw = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(raw, overrides)
        _require(cfg, "out_dir")
        _existing(cfg, "data_dir", "gt_csv", "manifest", "features", "model_dir")
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
    except (ArgumentError, ParseError) as exc:
        return _fail(EXIT_VALIDATION, exc)
    except OSError as exc:
        return _fail(EXIT_RUNTIME, exc)
    func = COMMANDS[args.command][0]
    inputs = [args.config] if args.config else []
    try:
        with OutDirLock(out):
            func(cfg, out, inputs)
            write_run_manifest(out, args.command, cfg, inputs)
    except (ArgumentError, ParseError) as exc:
        return _fail(EXIT_VALIDATION, exc)
    except (OlConvNetError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
