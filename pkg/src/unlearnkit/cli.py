"""Command-line front end: train, unlearn, evaluate, report, all.

Configuration comes from a JSON file; command-line flags override file
values, which override built-in defaults. All randomness flows from the
config seed. Exit codes: 0 success, 2 configuration or usage error,
3 numerical divergence, 4 I/O error.
"""

import argparse
import copy
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import blob_train_test, load_cifar10_bin, load_idx, split_by_class
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    FormatError,
    IntegrityError,
    StateError,
    UnlearnkitError,
)
from .evaluate import (
    MetricsReport,
    build_report,
    evaluate_model,
    loss_split,
    write_loss_split,
)
from .lora import LoraConfig
from .models import build_small_cnn, build_tiny_vit
from .pipeline import PARADIGMS, Paradigm, run_paradigm, train_epochs, unmasked_trainable_count
from .pruning import PruneTargetSpec

# Unlearning runs use small batches (many optimizer steps per epoch): the
# desk-scale retain set is ~20x smaller than the full-scale one, so step
# counts per epoch have to be made up in batch size for the five-epoch
# paradigms to actually move the model. The base phase trains with larger
# batches so the starting model is realistically (not exhaustively)
# converged.
DEFAULT_CONFIG = {
    "seed": 1,
    "deterministic": False,
    "out_dir": "runs/default",
    "forget_class": 0,
    "epochs": [5, 10],
    "retrain_epochs": 30,
    "base_epochs": 3,
    "base_batch_size": 64,
    "batch_size": 8,
    "lr": 1e-3,
    "mia_per_side": None,
    "paradigms": list(PARADIGMS),
    "dataset": {
        "kind": "synthetic",
        "classes": 10,
        "n_per_class": 200,
        "n_test_per_class": 50,
        "channels": 3,
        "height": 16,
        "width": 16,
        "spread": 0.8,
        "seed": None,  # falls back to the top-level seed
    },
    "model": {
        "kind": "small-cnn",
        "channels": [16, 32, 64],
        "patch": 4,
        "dim": 64,
        "heads": 4,
        "depth": 4,
    },
    "prune": {"sparsity": 0.5, "targets": None},  # None = per-model default
    "lora": {"rank": 4, "alpha": 8.0, "targets": None},
}

# Default prune/adapter targeting per architecture: every conv layer for
# the CNN; the last linear and last attention layer (prune) and the last
# attention layer (adapters) for the transformer.
MODEL_DEFAULT_TARGETS = {
    "small-cnn": {"prune": "all-conv", "lora": "all-conv"},
    "tiny-vit": {"prune": ["last-linear", "last-attention"], "lora": "last-attention"},
}


def _deep_update(base, overrides):
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load_config(path=None, flag_overrides=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        _deep_update(cfg, file_cfg)
    if flag_overrides:
        _deep_update(cfg, flag_overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if cfg["model"]["kind"] not in MODEL_DEFAULT_TARGETS:
        raise ConfigError(f"unknown model kind {cfg['model']['kind']!r}")
    epochs = cfg["epochs"]
    if not epochs or any(e < 1 for e in epochs):
        raise ConfigError(f"epoch settings must be positive, got {epochs}")
    if not (0.0 <= cfg["prune"]["sparsity"] < 1.0):
        raise ConfigError(f"sparsity must be in [0,1), got {cfg['prune']['sparsity']}")
    for name in cfg["paradigms"]:
        if name not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {name!r}; expected one of {PARADIGMS}")
    ds = cfg["dataset"]
    if ds["kind"] == "idx":
        keys = ("train_images", "train_labels", "test_images", "test_labels")
        for key in keys:
            if key not in ds:
                raise ConfigError(f"idx dataset needs path '{key}'")
            if not Path(ds[key]).exists():
                raise ConfigError(f"dataset path does not exist: {ds[key]}")
    elif ds["kind"] == "cifar10-bin":
        for key in ("train_paths", "test_paths"):
            if key not in ds:
                raise ConfigError(f"cifar10-bin dataset needs path list '{key}'")
            for p in ds[key]:
                if not Path(p).exists():
                    raise ConfigError(f"dataset path does not exist: {p}")
    elif ds["kind"] != "synthetic":
        raise ConfigError(f"unknown dataset kind {ds['kind']!r}")


def load_dataset_pair(cfg):
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        seed = ds["seed"] if ds["seed"] is not None else cfg["seed"]
        return blob_train_test(
            seed, ds["classes"], ds["n_per_class"], ds["n_test_per_class"],
            ds["channels"], ds["height"], ds["width"], ds["spread"],
        )
    if ds["kind"] == "idx":
        train = load_idx(ds["train_images"], ds["train_labels"])
        test = load_idx(ds["test_images"], ds["test_labels"])
        return train, test
    train = load_cifar10_bin(ds["train_paths"])
    test = load_cifar10_bin(ds["test_paths"])
    return train, test


def make_model(cfg, seed):
    m = cfg["model"]
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        in_channels, image_size = ds["channels"], ds["height"]
    elif ds["kind"] == "idx":
        in_channels, image_size = 1, 28
    else:
        in_channels, image_size = 3, 32
    classes = ds.get("classes", 10)
    if m["kind"] == "small-cnn":
        return build_small_cnn(m["channels"], classes, seed, in_channels=in_channels)
    return build_tiny_vit(
        m["patch"], m["dim"], m["heads"], m["depth"], classes, seed,
        image_size=image_size, in_channels=in_channels,
    )


def make_paradigm(cfg, name, epochs):
    prune_targets = cfg["prune"]["targets"] or MODEL_DEFAULT_TARGETS[cfg["model"]["kind"]]["prune"]
    lora_targets = cfg["lora"]["targets"] or MODEL_DEFAULT_TARGETS[cfg["model"]["kind"]]["lora"]
    prune = PruneTargetSpec(prune_targets, cfg["prune"]["sparsity"]) if name in ("prune-ft", "prune-lora") else None
    lora = (
        LoraConfig(cfg["lora"]["rank"], cfg["lora"]["alpha"], lora_targets)
        if name in ("lora-ft", "prune-lora")
        else None
    )
    if name == "retrain":
        epochs = cfg["retrain_epochs"]
    return Paradigm(kind=name, epochs=epochs, prune=prune, lora=lora, seed=cfg["seed"] + 10)


class Workspace:
    """Stable output layout under the configured directory."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        for sub in ("checkpoints", "records", "reports", "reports/rows", "loss_splits"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def checkpoint(self, stem):
        return self.root / "checkpoints" / f"{stem}.ckpt"

    def record(self, stem):
        return self.root / "records" / f"{stem}.json"

    def row(self, stem):
        return self.root / "reports" / "rows" / f"{stem}.json"

    def loss_file(self, stem):
        return self.root / "loss_splits" / f"{stem}.csv"

    @property
    def report_jsonl(self):
        return self.root / "reports" / "report.jsonl"

    @property
    def report_csv(self):
        return self.root / "reports" / "report.csv"


def _record_dict(record):
    return {
        "seconds_per_epoch": record.seconds_per_epoch,
        "trainable_params": record.trainable_params,
        "optimizer_state_elements": record.optimizer_state_elements,
        "memory_proxy_bytes": record.memory_proxy_bytes,
        "epoch_losses": record.epoch_losses,
        "epochs": record.epochs,
        "steps": record.steps,
    }


def cmd_train(cfg, force=False):
    """Train the K-class base model on the full train set; returns the
    checkpoint path. Reused if it already exists unless force=True."""
    ws = Workspace(cfg["out_dir"])
    ckpt = ws.checkpoint("base")
    if ckpt.exists() and not force:
        print(f"[train] reusing existing base checkpoint {ckpt}")
        return ckpt
    train, _ = load_dataset_pair(cfg)
    model = make_model(cfg, cfg["seed"] + 1)
    record = train_epochs(model, train, cfg["base_epochs"], cfg["seed"], lr=cfg["lr"],
                          batch_size=cfg["base_batch_size"])
    save_checkpoint(model, ckpt)
    ws.record("base").write_text(json.dumps(_record_dict(record), indent=2))
    print(f"[train] base model -> {ckpt} (final epoch loss {record.epoch_losses[-1]:.4f})")
    return ckpt


def cmd_unlearn(cfg, paradigm_name, epochs):
    """Run one paradigm against the stored base checkpoint; writes the
    unlearned checkpoint and its run record, returns (stem, model, record)."""
    ws = Workspace(cfg["out_dir"])
    base = ws.checkpoint("base")
    if not base.exists():
        raise ConfigError(f"base checkpoint missing: {base} (run the train command first)")
    train, test = load_dataset_pair(cfg)
    split = split_by_class(train, test, cfg["forget_class"])
    paradigm = make_paradigm(cfg, paradigm_name, epochs)
    model, record = run_paradigm(str(base), split, paradigm, lr=cfg["lr"], batch_size=cfg["batch_size"])
    stem = f"{paradigm_name}_{epochs}ep"
    save_checkpoint(model, ws.checkpoint(stem))
    ws.record(stem).write_text(json.dumps(_record_dict(record), indent=2))
    print(f"[unlearn] {stem} -> {ws.checkpoint(stem)} ({record.seconds_per_epoch:.2f}s/epoch)")
    return stem, model, record


def _evaluate_into_row(cfg, ws, model, stem, paradigm_name, epochs, record=None):
    train, test = load_dataset_pair(cfg)
    split = split_by_class(train, test, cfg["forget_class"])
    metrics = evaluate_model(model, split, mia_seed=cfg["seed"] + 7, n_per_side=cfg["mia_per_side"])
    losses = loss_split(model, split.test_retain, split.df)
    write_loss_split(losses, ws.loss_file(stem))
    rte = None
    memory = trainable = None
    if record is not None:
        rte = None if cfg["deterministic"] else record["seconds_per_epoch"]
        memory = record["memory_proxy_bytes"]
        trainable = record["trainable_params"]
    if memory is None:
        trainable = unmasked_trainable_count(model)
        memory = 12 * trainable
    row = MetricsReport(
        paradigm=paradigm_name,
        epochs=epochs,
        ua=metrics["ua"],
        mia_efficacy=metrics["mia_efficacy"],
        ra=metrics["ra"],
        ta=metrics["ta"],
        rte_secs_per_epoch=rte,
        memory_proxy_bytes=memory,
        trainable_params=trainable,
    )
    d = dict(row.__dict__)
    ws.row(stem).write_text(json.dumps(d, indent=2))
    return row


def _stem_parts(stem):
    if stem == "base":
        return "base", None
    name, _, ep = stem.rpartition("_")
    return name, int(ep.removesuffix("ep"))


def cmd_evaluate(cfg, checkpoint_path):
    """Evaluate one checkpoint: metrics row plus loss-split data file."""
    ws = Workspace(cfg["out_dir"])
    path = Path(checkpoint_path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {checkpoint_path}")
    model = load_checkpoint(str(path))
    stem = path.stem
    paradigm_name, epochs = _stem_parts(stem)
    if epochs is None:
        epochs = cfg["base_epochs"]
    record = None
    record_path = ws.record(stem)
    if record_path.exists():
        record = json.loads(record_path.read_text())
    row = _evaluate_into_row(cfg, ws, model, stem, paradigm_name, epochs, record)
    print(
        f"[evaluate] {stem}: UA={row.ua:.2f} MIA={row.mia_efficacy:.2f} "
        f"RA={row.ra:.2f} TA={row.ta:.2f}"
    )
    return row


def _row_sort_key(row):
    order = {name: i for i, name in enumerate(PARADIGMS)}
    return (order.get(row.paradigm, len(order)), row.epochs)


def cmd_report(cfg):
    """Combine all evaluated rows into the final report files."""
    ws = Workspace(cfg["out_dir"])
    rows = []
    for path in sorted((ws.root / "reports" / "rows").glob("*.json")):
        d = json.loads(path.read_text())
        if d["paradigm"] == "base":
            continue
        rows.append(MetricsReport(**d))
    if not rows:
        raise ConfigError(f"no evaluated rows under {ws.root / 'reports' / 'rows'}")
    rows.sort(key=_row_sort_key)
    build_report(rows, ws.report_jsonl, ws.report_csv, epoch_settings=cfg["epochs"])
    print(f"[report] {ws.report_jsonl}\n[report] {ws.report_csv}")
    return rows


def cmd_all(cfg, force_retrain=False):
    """Full experiment: base model, every paradigm at every epoch setting,
    evaluation, and the combined report."""
    ws = Workspace(cfg["out_dir"])
    cmd_train(cfg, force=force_retrain)
    rows = []
    for name in cfg["paradigms"]:
        settings = cfg["epochs"]
        if name == "retrain":
            # One long run; its metrics fill every epoch-setting row.
            stem, model, record = cmd_unlearn(cfg, name, cfg["retrain_epochs"])
            rec = _record_dict(record)
            for e in settings:
                rows.append(_evaluate_into_row(cfg, ws, model, f"{name}_{e}ep", name, e, rec))
            continue
        for e in settings:
            stem, model, record = cmd_unlearn(cfg, name, e)
            rows.append(_evaluate_into_row(cfg, ws, model, stem, name, e, _record_dict(record)))
    rows.sort(key=_row_sort_key)
    build_report(rows, ws.report_jsonl, ws.report_csv, epoch_settings=cfg["epochs"])
    print(f"[all] wrote {len(rows)} rows -> {ws.report_csv}")
    return rows


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="unlearnkit",
        description="Class-forgetting experiments: train, unlearn, evaluate, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--forget-class", type=int, dest="forget_class")
        p.add_argument("--deterministic", action="store_true", default=None,
                       help="suppress wall-clock values in report files")
        p.add_argument("--out", dest="out_dir", help="output directory")

    p_train = sub.add_parser("train", help="train the base model")
    common(p_train)
    p_train.add_argument("--force-retrain", action="store_true")

    p_unlearn = sub.add_parser("unlearn", help="run one unlearning paradigm")
    common(p_unlearn)
    p_unlearn.add_argument("--paradigm", required=True, choices=PARADIGMS)
    p_unlearn.add_argument("--epochs", type=int, default=None)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("checkpoint")

    p_report = sub.add_parser("report", help="combine evaluated rows into report files")
    common(p_report)

    p_all = sub.add_parser("all", help="base training, every paradigm, evaluation, report")
    common(p_all)
    p_all.add_argument("--force-retrain", action="store_true")
    p_all.add_argument("--epochs", type=int, default=None,
                       help="replace the epoch-settings list with this single value")
    return parser


def _overrides_from_args(args):
    overrides = {}
    for key in ("seed", "forget_class", "out_dir"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "deterministic", None):
        overrides["deterministic"] = True
    if args.command == "all" and getattr(args, "epochs", None):
        overrides["epochs"] = [args.epochs]
    return overrides


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides_from_args(args))
        if args.command == "train":
            cmd_train(cfg, force=args.force_retrain)
        elif args.command == "unlearn":
            epochs = args.epochs if args.epochs is not None else cfg["epochs"][0]
            cmd_unlearn(cfg, args.paradigm, epochs)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint)
        elif args.command == "report":
            cmd_report(cfg)
        elif args.command == "all":
            cmd_all(cfg, force_retrain=args.force_retrain)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, IntegrityError, StateError, DimensionError,
            UnlearnkitError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
