"""Training loop and the five unlearning procedures.

Every procedure fine-tunes on the retain set only. `run_paradigm` is
deterministic given (checkpoint, split, paradigm, seed): all shuffling
and initialization flows from explicit seeds.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint
from .data import batch_iter
from .errors import ConfigError, DivergenceError
from .lora import LoraConfig, attach_adapters, merge_all
from .models import build_from_descriptor
from .optim import Adam
from .pruning import PruneTargetSpec, apply_prune, enforce_masks
from .tensor import softmax_cross_entropy

PARADIGMS = ("retrain", "finetune", "prune-ft", "lora-ft", "prune-lora")

DEFAULT_LR = 1e-3
DEFAULT_BATCH = 64


@dataclass
class Paradigm:
    """One unlearning recipe: the procedure kind, its epoch budget, and the
    prune/adapter configs the kind requires."""

    kind: str
    epochs: int
    prune: PruneTargetSpec = None
    lora: LoraConfig = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {self.kind!r}; expected one of {PARADIGMS}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.kind in ("prune-ft", "prune-lora") and self.prune is None:
            raise ConfigError(f"paradigm {self.kind!r} needs a prune spec")
        if self.kind in ("lora-ft", "prune-lora") and self.lora is None:
            raise ConfigError(f"paradigm {self.kind!r} needs an adapter config")


@dataclass
class RunRecord:
    """Instrumentation for one fine-tuning run."""

    seconds_per_epoch: float
    trainable_params: int
    optimizer_state_elements: int
    memory_proxy_bytes: int
    epoch_losses: list = field(default_factory=list)
    epochs: int = 0
    steps: int = 0


def unmasked_trainable_count(model):
    """Trainable elements excluding pruned-away positions, adapters included."""
    total = sum(p.kept_count() for _, p in model.named_params() if p.trainable)
    for _, adapter in model.named_adapters():
        if adapter.a.trainable:
            total += adapter.a.size
        if adapter.b.trainable:
            total += adapter.b.size
    return total


def memory_proxy(model, optimizer=None):
    """Bytes for the trainable weights plus their Adam moments, at 4 bytes
    per float32 element. A byte-accounting proxy, not a device measurement."""
    kept = unmasked_trainable_count(model)
    return 4 * (kept + 2 * kept)


def train_epochs(model, dataset, epochs, seed, lr=DEFAULT_LR, batch_size=DEFAULT_BATCH,
                 beta1=0.9, beta2=0.999, eps=1e-8):
    """Adam + cross-entropy over shuffled batches; returns a RunRecord with
    wall-clock timing and per-epoch mean losses."""
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    opt = Adam(model.trainable_params(), lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    epoch_losses = []
    epoch_times = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        losses = []
        for b, (xb, yb) in enumerate(batch_iter(dataset, batch_size, seed, epoch)):
            logits = model.forward(xb, train=True)
            loss, grad = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b
                )
            model.zero_grads()
            model.backward(grad)
            opt.step()
            losses.append(loss)
        epoch_times.append(time.perf_counter() - t0)
        epoch_losses.append(float(np.mean(losses)))
    return RunRecord(
        seconds_per_epoch=float(np.mean(epoch_times)),
        trainable_params=unmasked_trainable_count(model),
        optimizer_state_elements=2 * unmasked_trainable_count(model),
        memory_proxy_bytes=memory_proxy(model),
        epoch_losses=epoch_losses,
        epochs=epochs,
        steps=opt.t,
    )


def run_paradigm(base_checkpoint, split, paradigm, lr=DEFAULT_LR, batch_size=DEFAULT_BATCH):
    """Execute one unlearning paradigm against a trained base checkpoint.

    retrain     fresh seed-derived init, trained on the retain set
    finetune    base weights, every parameter trainable
    prune-ft    base weights, structured prune, full fine-tune under masks
    lora-ft     base weights frozen, adapters + head trained
    prune-lora  prune, then adapters + head under masks, adapters merged
                into the returned model
    """
    if paradigm.kind == "retrain":
        base = load_checkpoint(base_checkpoint)
        model = build_from_descriptor(base.descriptor, seed=paradigm.seed + 1)
    else:
        model = load_checkpoint(base_checkpoint)

    if paradigm.kind in ("finetune", "retrain"):
        model.set_all_trainable(True)
    elif paradigm.kind == "prune-ft":
        model.set_all_trainable(True)
        apply_prune(model, paradigm.prune)
    elif paradigm.kind == "lora-ft":
        attach_adapters(model, paradigm.lora, seed=paradigm.seed)
    elif paradigm.kind == "prune-lora":
        apply_prune(model, paradigm.prune)
        attach_adapters(model, paradigm.lora, seed=paradigm.seed)

    record = train_epochs(model, split.dr, paradigm.epochs, paradigm.seed, lr=lr, batch_size=batch_size)

    if paradigm.kind == "prune-lora":
        merge_all(model)
        enforce_masks(model)
    return model, record
