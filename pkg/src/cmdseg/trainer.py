"""Training loop: Adam, stepwise-decayed learning rate, half/half mixed
batches, setting-dependent loss assembly, logging and evaluation.

Training is strictly serial and deterministic per (config, seed): two
runs with the same inputs produce byte-identical logs and checkpoints.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import metrics as M
from .distill import (ConfusionDistribution, KdLoss, LogitsBatch, distill,
                      format_snapshot, kd_loss)
from .losses import effective_alpha, l2_penalty, segmentation_loss, softmax_probs, total_loss
from .network import (ArchConfig, ParameterStore, SETTINGS, build_network,
                      forward_modality, save_checkpoint)
from .synthdata import Dataset
from .tensor import NonFiniteError, Tensor

MODALITIES = ("A", "B")


@dataclass
class TrainingConfig:
    setting: str = "ours"
    alpha: float = 0.5
    eta: float = 1e-4
    temperature: float = 2.0
    base_lr: float = 1e-4
    decay_factor: float = 0.95
    decay_interval: int = 1000
    batch_per_modality: int = 4
    iterations: int = 2000
    seed: int = 0
    snapshot_interval: int = 100
    validation_interval: int = 100

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not (1.0 <= self.temperature < 10.0):
            raise ValueError("temperature must lie in [1, 10)")
        if self.batch_per_modality < 1 or self.decay_interval < 1:
            raise ValueError("batch size and decay interval must be >= 1")


@dataclass
class AdamState:
    """Standard Adam moments, one pair per parameter key."""

    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over all given parameters (in place)."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for key in params:
        theta = params[key]
        g = grads[key]
        if g.shape != theta.data.shape:
            raise ValueError(f"gradient shape mismatch for {key}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {key}; aborting step")
        if key not in state.m:
            state.m[key] = np.zeros_like(theta.data)
            state.v[key] = np.zeros_like(theta.data)
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        theta.data = theta.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


def learning_rate_at(iteration: int, cfg: TrainingConfig) -> float:
    """base * decay_factor ** floor(iteration / interval), stepwise-constant."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.base_lr * cfg.decay_factor ** (iteration // cfg.decay_interval)


@dataclass
class TrainingLog:
    iterations: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    snapshots: list[str] = field(default_factory=list)     # formatted text records

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "iterations.csv", self.iterations)
        _write_csv(out_dir / "validation.csv", self.validations)
        (out_dir / "snapshots.txt").write_text("".join(self.snapshots))


def _write_csv(path, records: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not records:
            fh.write("")
            return
        writer = csv.DictWriter(fh, fieldnames=list(records[0].keys()))
        writer.writeheader()
        for rec in records:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in rec.items()})


def load_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _param_key(i: int, tag: str, name: str) -> str:
    return f"layer{i}.{tag}.{name}"


def _collect(store: ParameterStore, tags=None) -> dict[str, Tensor]:
    out = {}
    for i, tag, name, t in store.trainables():
        if tags is None or tag in tags:
            out[_param_key(i, tag, name)] = t
    return out


def _batch_arrays(cases, idx) -> tuple[np.ndarray, np.ndarray]:
    imgs = np.stack([cases[i].image for i in idx])[:, None, :, :]
    labels = np.stack([cases[i].labels for i in idx])
    return imgs, labels


def _grads_of(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in params.items()}


def _foreground_dice(probs_np: np.ndarray, labels: np.ndarray, num_classes: int) -> dict[int, float]:
    pred = probs_np.argmax(axis=1)
    return {c: M.dice_coefficient(pred == c, labels == c) for c in range(1, num_classes)}


def run_training(cfg: TrainingConfig, dataset: Dataset, arch: ArchConfig,
                 out_dir=None) -> tuple[ParameterStore, TrainingLog]:
    """Train one model per the configured setting. Persists checkpoint + logs
    under out_dir when given."""
    if arch.setting != cfg.setting:
        raise ValueError(f"arch setting {arch.setting!r} != training setting {cfg.setting!r}")
    for m in MODALITIES:
        if not dataset.split(m, "train"):
            raise ValueError(f"empty training split for modality {m}")

    store = build_network(arch, cfg.seed)
    log = TrainingLog()
    if cfg.setting == "individual":
        _train_individual(cfg, dataset, arch, store, log)
    else:
        _train_mixed(cfg, dataset, arch, store, log)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint.zip", arch, store)
        log.save(out_dir)
        (out_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True))
    return store, log


def _train_mixed(cfg: TrainingConfig, dataset: Dataset, arch: ArchConfig,
                 store: ParameterStore, log: TrainingLog) -> None:
    rng = np.random.default_rng([cfg.seed, 7])
    train = {m: dataset.split(m, "train") for m in MODALITIES}
    params = _collect(store)
    state = AdamState()
    alpha = effective_alpha(cfg.setting, cfg.alpha)

    for it in range(cfg.iterations):
        lr = learning_rate_at(it, cfg)
        losses = {}
        dices = {}
        wces = {}
        qs: dict[str, ConfusionDistribution] = {}
        for m in MODALITIES:
            idx = rng.integers(0, len(train[m]), size=cfg.batch_per_modality)
            imgs, labels = _batch_arrays(train[m], idx)
            logits = forward_modality(arch, store, Tensor(imgs), m, mode="train")
            seg, d, ce = segmentation_loss(logits, labels)
            losses[m], dices[m], wces[m] = seg, d, ce
            qs[m] = distill(LogitsBatch(logits, labels), cfg.temperature)
        kd = kd_loss(qs["A"], qs["B"])
        l2 = l2_penalty(store)
        try:
            total, breakdown = total_loss(losses["A"], losses["B"], kd.value, l2,
                                          alpha, cfg.eta)
            store.zero_grad()
            total.backward()
        except NonFiniteError as err:
            raise NonFiniteError(f"iteration {it + 1}: {err}") from err
        adam_step(params, _grads_of(params), state, lr)

        log.iterations.append({
            "iter": it + 1, "lr": lr,
            "seg_a": breakdown.seg_a, "seg_b": breakdown.seg_b,
            "kd_train": breakdown.kd, "total": breakdown.total,
        })
        last = it + 1 == cfg.iterations
        if (it + 1) % cfg.snapshot_interval == 0 or last:
            for m in MODALITIES:
                log.snapshots.append(format_snapshot(it + 1, m, qs[m]))
        if (it + 1) % cfg.validation_interval == 0 or last:
            log.validations.append(_validate(cfg, dataset, arch, store, it + 1, with_kd=True))


def _train_individual(cfg: TrainingConfig, dataset: Dataset, arch: ArchConfig,
                      store: ParameterStore, log: TrainingLog) -> None:
    """Two fully independent optimizations sharing an iteration counter.

    Parameter scopes, RNG streams and Adam states are disjoint, so this
    equals training each modality's network separately.
    """
    rngs = {m: np.random.default_rng([cfg.seed, 7, k]) for k, m in enumerate(MODALITIES)}
    states = {m: AdamState() for m in MODALITIES}
    params = {m: _collect(store, tags=(m,)) for m in MODALITIES}
    train = {m: dataset.split(m, "train") for m in MODALITIES}

    for it in range(cfg.iterations):
        lr = learning_rate_at(it, cfg)
        seg_vals = {}
        for m in MODALITIES:
            idx = rngs[m].integers(0, len(train[m]), size=cfg.batch_per_modality)
            imgs, labels = _batch_arrays(train[m], idx)
            logits = forward_modality(arch, store, Tensor(imgs), m, mode="train")
            seg, _d, _ce = segmentation_loss(logits, labels)
            l2 = _scope_l2(store, m)
            loss = seg + l2 * cfg.eta
            store.zero_grad()
            loss.backward()
            adam_step(params[m], _grads_of(params[m]), states[m], lr)
            seg_vals[m] = seg.item()
        log.iterations.append({
            "iter": it + 1, "lr": lr,
            "seg_a": seg_vals["A"], "seg_b": seg_vals["B"],
            "kd_train": float("nan"),
            "total": seg_vals["A"] + seg_vals["B"],
        })
        last = it + 1 == cfg.iterations
        if (it + 1) % cfg.validation_interval == 0 or last:
            log.validations.append(_validate(cfg, dataset, arch, store, it + 1, with_kd=False))


def _scope_l2(store: ParameterStore, tag: str) -> Tensor:
    total = None
    for _i, t_tag, _name, t in store.trainables():
        if t_tag != tag:
            continue
        sq = (t * t).sum()
        total = sq if total is None else total + sq
    return total if total is not None else Tensor(0.0)


def _validate(cfg: TrainingConfig, dataset: Dataset, arch: ArchConfig,
              store: ParameterStore, iteration: int, with_kd: bool) -> dict:
    record: dict = {"iter": iteration, "kd_val": float("nan")}
    qs = {}
    for m in MODALITIES:
        cases = dataset.split(m, "val") or dataset.split(m, "train")
        imgs = np.stack([c.image for c in cases])[:, None, :, :]
        labels = np.stack([c.labels for c in cases])
        logits = forward_modality(arch, store, Tensor(imgs), m, mode="eval")
        probs = softmax_probs(logits).data
        for cls, value in _foreground_dice(probs, labels, dataset.num_classes).items():
            record[f"dice_{m}_{cls}"] = value
        if with_kd:
            qs[m] = distill(LogitsBatch(logits, labels), cfg.temperature)
    if with_kd:
        record["kd_val"] = kd_loss(qs["A"], qs["B"]).value.item()
    return record


def evaluate_split(arch: ArchConfig, store: ParameterStore, dataset: Dataset,
                   split: str, modality: str,
                   spacing: tuple[float, float] = (1.0, 1.0)) -> list[dict]:
    """Per-case, per-foreground-class dice (%) and Hausdorff distance.

    Hausdorff is None (missing structure) when either mask is empty.
    """
    if (dataset.height, dataset.width) == (0, 0):
        raise ValueError("empty dataset geometry")
    if arch.num_classes != dataset.num_classes:
        raise ValueError("checkpoint classes do not match dataset")
    results = []
    for case in dataset.split(modality, split):
        imgs = case.image[None, None, :, :]
        logits = forward_modality(arch, store, Tensor(imgs), modality, mode="eval")
        pred = logits.data.argmax(axis=1)[0]   # ties break toward the lowest class
        per_class = {}
        for cls in range(1, dataset.num_classes):
            pm = pred == cls
            gm = case.labels == cls
            dice = M.dice_coefficient(pm, gm)
            hd = M.hausdorff_distance(pm, gm, spacing) if pm.any() and gm.any() else None
            per_class[cls] = {"dice": dice, "hausdorff": hd}
        results.append(per_class)
    return results
