"""The six evaluation metrics, the confidence-threshold membership
predictor, loss-separation data, and report emission.

The membership attack is a one-dimensional threshold on the softmax
probability of the true label: high confidence means "was trained on".
The predictor is trained per unlearned model on a balanced sample of
retain-train (members) vs retain-test (non-members), then applied to the
forget set; MIA-Efficacy is the fraction of forget samples it calls
non-members.
"""

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import balanced_mia_sample
from .errors import ConfigError

EVAL_BATCH = 512


def model_logits(model, images):
    chunks = [model.forward(images[i : i + EVAL_BATCH], train=False) for i in range(0, len(images), EVAL_BATCH)]
    return np.concatenate(chunks, axis=0)


def accuracy(model, dataset):
    """Percent of samples whose argmax logit matches the label; argmax ties
    resolve to the lowest class index."""
    if len(dataset) == 0:
        raise ConfigError("cannot compute accuracy on an empty dataset")
    if model.class_count != dataset.class_count:
        raise ConfigError(
            f"model has {model.class_count} classes but dataset has {dataset.class_count}"
        )
    preds = np.argmax(model_logits(model, dataset.images), axis=1)
    return 100.0 * float((preds == dataset.labels).sum()) / len(dataset)


def unlearning_accuracy(model, df):
    """100 - Acc(forget set): higher means more thoroughly forgotten."""
    return 100.0 - accuracy(model, df)


def _log_probs(model, dataset):
    logits = model_logits(model, dataset.images).astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def confidence_feature(model, dataset):
    """Softmax probability assigned to each sample's true label."""
    if model.class_count != dataset.class_count:
        raise ConfigError(
            f"model has {model.class_count} classes but dataset has {dataset.class_count}"
        )
    lp = _log_probs(model, dataset)
    return np.exp(lp[np.arange(len(dataset)), dataset.labels])


@dataclass
class MiaPredictor:
    """Threshold rule: feature >= threshold predicts member."""

    threshold: float
    train_balanced_accuracy: float

    def predict_member(self, features):
        return np.asarray(features) >= self.threshold


def mia_candidate_thresholds(member_feats, nonmember_feats):
    """Midpoints between consecutive distinct pooled features, plus the
    pooled min and max themselves."""
    pooled = np.unique(np.concatenate([member_feats, nonmember_feats]))
    mids = (pooled[:-1] + pooled[1:]) / 2.0
    return np.concatenate([[pooled[0]], mids, [pooled[-1]]])


def train_mia(member_feats, nonmember_feats):
    """Pick the threshold maximizing balanced accuracy on the (balanced)
    training features; ties go to the smallest threshold."""
    member_feats = np.asarray(member_feats, dtype=np.float64)
    nonmember_feats = np.asarray(nonmember_feats, dtype=np.float64)
    if member_feats.size == 0 or nonmember_feats.size == 0:
        raise ConfigError("both feature sets must be nonempty")
    if member_feats.size != nonmember_feats.size:
        raise ConfigError(
            f"MIA training needs balanced sides, got {member_feats.size} vs {nonmember_feats.size}"
        )
    cands = mia_candidate_thresholds(member_feats, nonmember_feats)
    tpr = (member_feats[:, None] >= cands[None, :]).mean(axis=0)
    tnr = (nonmember_feats[:, None] < cands[None, :]).mean(axis=0)
    balanced = (tpr + tnr) / 2.0
    best = int(np.argmax(balanced))  # first max = smallest candidate
    return MiaPredictor(threshold=float(cands[best]), train_balanced_accuracy=float(balanced[best]))


def mia_efficacy(predictor, model, df):
    """Percent of forget samples the predictor calls non-members (TN / |Df|)."""
    if len(df) == 0:
        raise ConfigError("forget set is empty")
    feats = confidence_feature(model, df)
    tn = int((feats < predictor.threshold).sum())
    return 100.0 * tn / len(df)


def per_sample_losses(model, dataset):
    lp = _log_probs(model, dataset)
    return -lp[np.arange(len(dataset)), dataset.labels]


def loss_split(model, test_retain, df):
    """Per-sample cross-entropy on the retain-test and forget sets, the raw
    data behind the loss-separation histograms."""
    if len(test_retain) == 0 or len(df) == 0:
        raise ConfigError("loss split needs nonempty test and forget sets")
    test_losses = per_sample_losses(model, test_retain)
    forget_losses = per_sample_losses(model, df)
    return {
        "test_losses": test_losses,
        "forget_losses": forget_losses,
        "mean_test": float(test_losses.mean()),
        "mean_forget": float(forget_losses.mean()),
    }


def write_loss_split(split_data, path):
    """Two-column file (set tag, loss value) consumable by any plotting tool."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["set", "loss"])
        for v in split_data["test_losses"]:
            w.writerow(["test", f"{v:.6f}"])
        for v in split_data["forget_losses"]:
            w.writerow(["forget", f"{v:.6f}"])


@dataclass
class MetricsReport:
    """One row of the results table."""

    paradigm: str
    epochs: int
    ua: float
    mia_efficacy: float
    ra: float
    ta: float
    rte_secs_per_epoch: float  # None when timing is suppressed (deterministic mode)
    memory_proxy_bytes: int
    trainable_params: int


def evaluate_model(model, split, mia_seed=0, n_per_side=None):
    """Compute UA, MIA-Efficacy, RA, TA for one unlearned model."""
    if n_per_side is None:
        n_per_side = min(len(split.test_retain), 2000)
    members, nonmembers = balanced_mia_sample(split.dr, split.test_retain, n_per_side, mia_seed)
    predictor = train_mia(
        confidence_feature(model, members), confidence_feature(model, nonmembers)
    )
    return {
        "ua": unlearning_accuracy(model, split.df),
        "mia_efficacy": mia_efficacy(predictor, model, split.df),
        "ra": accuracy(model, split.dr),
        "ta": accuracy(model, split.test_retain),
    }


PERCENT_FIELDS = ("ua", "mia_efficacy", "ra", "ta")


def _fmt_pct(v):
    return f"{v:.2f}"


def build_report(rows, jsonl_path, csv_path, epoch_settings=None):
    """Write the machine-readable rows (one JSON object per line, percentages
    rounded to 2 decimals) and a CSV with one row per paradigm and UA /
    MIA-Efficacy / RA / TA columns per epoch setting, plus RTE and the
    memory proxy. Missing RTE renders as '-'."""
    if not rows:
        raise ConfigError("report needs at least one row")
    with open(jsonl_path, "w") as f:
        for row in rows:
            d = asdict(row)
            for k in PERCENT_FIELDS:
                d[k] = round(d[k], 2)
            if d["rte_secs_per_epoch"] is not None:
                d["rte_secs_per_epoch"] = round(d["rte_secs_per_epoch"], 2)
            f.write(json.dumps(d) + "\n")

    if epoch_settings is None:
        epoch_settings = sorted({r.epochs for r in rows})
    paradigms = []
    for r in rows:
        if r.paradigm not in paradigms:
            paradigms.append(r.paradigm)
    by_key = {(r.paradigm, r.epochs): r for r in rows}
    header = ["paradigm"]
    for metric in PERCENT_FIELDS:
        header += [f"{metric}_{e}" for e in epoch_settings]
    header += ["rte_secs_per_epoch", "memory_proxy_bytes"]
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for paradigm in paradigms:
            cells = [paradigm]
            present = [by_key[(paradigm, e)] for e in epoch_settings if (paradigm, e) in by_key]
            for metric in PERCENT_FIELDS:
                for e in epoch_settings:
                    r = by_key.get((paradigm, e))
                    cells.append(_fmt_pct(getattr(r, metric)) if r else "-")
            rtes = [r.rte_secs_per_epoch for r in present if r.rte_secs_per_epoch is not None]
            cells.append(f"{np.mean(rtes):.2f}" if rtes else "-")
            cells.append(str(max(r.memory_proxy_bytes for r in present)))
            w.writerow(cells)
    return jsonl_path, csv_path


def parse_report_jsonl(path):
    with open(path) as f:
        return [MetricsReport(**json.loads(line)) for line in f if line.strip()]
