"""Contrastive retrieval training, the classification baseline, and experiment sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .dataio import Instance, RelationCatalog, Vocab, build_vocab, tokenize
from .infer import METRIC_CONVENTION, Metrics, evaluate
from .model import ModelConfig, RocModel
from .numcore import AdamHyper, AdamState, ConfigError, NumericDomainError, Tensor, UsageError


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite."""


# --- similarity and losses -----------------------------------------------------


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise NumericDomainError("cosine similarity of a near-zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(pair_batch, rel_batch) -> Tensor:
    """S[i, j] = cos(pair_i, rel_j)."""
    return nc.l2_normalize(pair_batch) @ nc.l2_normalize(rel_batch).T


def contrastive_loss_from_similarity(sim, tau: float) -> Tensor:
    """Mean over rows of -log softmax(S / tau)[i, i]."""
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    sim = nc.as_tensor(sim)
    n = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != n:
        raise UsageError("similarity matrix must be square")
    logp = nc.log_softmax(sim * (1.0 / tau), axis=-1)
    return -(logp[np.arange(n), np.arange(n)].mean())


def contrastive_loss(pair_batch, rel_batch, tau: float) -> Tensor:
    """In-batch InfoNCE over cosine similarities; row i of ``rel_batch`` is sample i's gold."""
    pair_batch, rel_batch = nc.as_tensor(pair_batch), nc.as_tensor(rel_batch)
    if pair_batch.shape[0] != rel_batch.shape[0]:
        raise UsageError("pair and relation batches differ in size")
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    return contrastive_loss_from_similarity(similarity_matrix(pair_batch, rel_batch), tau)


def classification_loss(pair_batch, gold_indices, W_c, b_c) -> Tensor:
    """Mean cross-entropy of softmax(W_c h + b_c) against gold indices."""
    pair_batch, W_c, b_c = nc.as_tensor(pair_batch), nc.as_tensor(W_c), nc.as_tensor(b_c)
    gold = np.asarray(gold_indices, dtype=np.int64)
    k = W_c.shape[0]
    if gold.size and (gold.min() < 0 or gold.max() >= k):
        raise UsageError(f"gold index out of range for {k} classes")
    logp = nc.log_softmax(pair_batch @ W_c.T + b_c, axis=-1)
    return -(logp[np.arange(len(gold)), gold].mean())


# --- configuration -------------------------------------------------------------

ABLATION_FIELDS = ("use_fusion_encoder", "use_positions", "use_types", "use_visual", "num_fusion_layers")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 32
    epochs: int = 50
    temperature: float = 0.07
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 648
    eval_every: int = 1
    dedup_batches: bool = False
    early_stop_f1: float | None = None
    min_freq: int = 1
    record_batches: bool = False

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.eval_every < 1:
            raise ConfigError("epochs must be >= 0 and eval_every >= 1")
        self.model.validate()

    @property
    def head(self) -> str:
        return self.model.head

    @property
    def adam(self) -> AdamHyper:
        return AdamHyper(self.lr, self.beta1, self.beta2, self.adam_eps, self.weight_decay)

    def variant(self, head: str | None = None, **encoder_changes) -> "TrainConfig":
        """Copy with a different head and/or encoder ablation flags."""
        unknown = set(encoder_changes) - set(ABLATION_FIELDS) - {f.name for f in dataclasses.fields(self.model.encoder)}
        if unknown:
            raise ConfigError(f"unknown encoder fields {sorted(unknown)}")
        enc = dataclasses.replace(self.model.encoder, **encoder_changes)
        model = dataclasses.replace(self.model, encoder=enc, head=head or self.model.head)
        return dataclasses.replace(self, model=model)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(model=model, **d)


@dataclass
class TrainReport:
    config: dict
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    eval_history: list[dict] = field(default_factory=list)
    final_metrics: Metrics | None = None
    best_epoch: int = 0
    collision_rate: float = 0.0
    num_batches: int = 0
    wall_time: float = 0.0
    batches: list[list[str]] | None = None

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "config": self.config,
            "epoch_losses": self.epoch_losses,
            "step_losses": self.step_losses,
            "eval_history": self.eval_history,
            "final_metrics": self.final_metrics.to_dict() if self.final_metrics else None,
            "best_epoch": self.best_epoch,
            "collision_rate": self.collision_rate,
            "num_batches": self.num_batches,
            "convention": METRIC_CONVENTION,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        if self.batches is not None:
            d["batches"] = self.batches
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


# --- training ------------------------------------------------------------------


def make_batches(order: np.ndarray, batch_size: int, gold: np.ndarray, dedup: bool) -> list[np.ndarray]:
    """Split a shuffled order into batches.

    With ``dedup`` each batch greedily takes the next samples whose gold
    relation is not yet in it, so collisions only remain when unavoidable.
    """
    if not dedup:
        return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    pending = list(order)
    batches = []
    while pending:
        batch, seen, rest = [], set(), []
        for i in pending:
            if len(batch) < batch_size and gold[i] not in seen:
                batch.append(i)
                seen.add(gold[i])
            else:
                rest.append(i)
        if len(batch) < batch_size:
            fill = batch_size - len(batch)
            batch += rest[:fill]
            rest = rest[fill:]
        batches.append(np.asarray(batch))
        pending = rest
    return batches


def batch_loss(model: RocModel, instances: list[Instance], gold: np.ndarray, config: TrainConfig) -> Tensor:
    h_e = model.encode_pairs(instances)
    if model.config.head == "classification":
        return classification_loss(h_e, gold, model.params["cls.W_c"], model.params["cls.b_c"])
    return contrastive_loss(h_e, model.encode_relations(gold), config.temperature)


def _max_abs(grads: dict[str, np.ndarray]) -> float:
    vals = [float(np.max(np.abs(g))) for g in grads.values() if g.size]
    return max(vals, default=0.0, key=lambda v: (math.isnan(v), v))


def _diverged(step: int, batch: list[Instance], what: str, max_grad: float | None) -> TrainingDivergedError:
    grad = "n/a" if max_grad is None else f"{max_grad:.6g}"
    ids = [b.instance_id for b in batch]
    return TrainingDivergedError(f"training diverged at step {step}: {what}; max |grad| {grad}; batch ids {ids}")


def default_vocab(train_set: Sequence[Instance], catalog: RelationCatalog, min_freq: int = 1) -> Vocab:
    return build_vocab(train_set, min_freq, extra_texts=[tokenize(e.description) for e in catalog.entries])


def train(
    config: TrainConfig,
    train_set: Sequence[Instance],
    catalog: RelationCatalog,
    eval_set: Sequence[Instance] | None = None,
    vocab: Vocab | None = None,
) -> tuple[RocModel, TrainReport]:
    """Adam(W) training of the configured head; returns the best-eval-F1 model."""
    config.validate()
    if not train_set:
        raise UsageError("training set is empty")
    train_set = list(train_set)
    eval_set = list(eval_set) if eval_set else None
    started = time.perf_counter()
    vocab = vocab or default_vocab(train_set, catalog, config.min_freq)
    model = RocModel.initialize(config.model, vocab, catalog, config.seed)
    params = model.params
    try:
        gold = np.array([catalog.index(i.gold_relation) for i in train_set], dtype=np.int64)
    except KeyError as e:
        raise UsageError(str(e)) from None

    report = TrainReport(config=config.to_dict())
    if config.record_batches:
        report.batches = []
    shuffle_rng = np.random.default_rng([config.seed, 1])
    state = AdamState.zeros_like(params)
    hyper = config.adam
    best_params, best_f1, best_metrics = params.copy(), -1.0, None
    collisions = step = 0

    if eval_set is not None and config.epochs == 0:
        best_metrics = evaluate(model, eval_set)

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        for idx in make_batches(order, config.batch_size, gold, config.dedup_batches):
            step += 1
            batch = [train_set[i] for i in idx]
            try:
                loss = batch_loss(model, batch, gold[idx], config)
            except NumericDomainError as e:
                raise _diverged(step, batch, str(e), None) from None
            if not math.isfinite(loss.item()):
                loss.backward()
                grads = {k: t.grad for k, t in params.items() if t.grad is not None}
                raise _diverged(step, batch, f"non-finite loss {loss.item()}", _max_abs(grads))
            result = nc.backward(loss, params)
            worst = _max_abs(result.grads)
            if not math.isfinite(worst):
                raise _diverged(step, batch, "non-finite gradient", worst)
            nc.adam_step(params, result.grads, state, hyper)
            losses.append(result.loss)
            report.step_losses.append(result.loss)
            collisions += len(set(gold[idx].tolist())) < len(idx)
            report.num_batches += 1
            if report.batches is not None:
                report.batches.append([b.instance_id for b in batch])
        report.epoch_losses.append(float(np.mean(losses)))

        if eval_set is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            metrics = evaluate(model, eval_set)
            report.eval_history.append({"epoch": epoch, **metrics.to_dict()})
            if metrics.f1 > best_f1:
                best_f1, best_metrics, report.best_epoch = metrics.f1, metrics, epoch
                best_params = params.copy()
            if config.early_stop_f1 is not None and metrics.f1 >= config.early_stop_f1:
                break

    if eval_set is not None and config.epochs > 0:
        model = model.with_params(best_params)
    else:
        report.best_epoch = len(report.epoch_losses)
    report.final_metrics = best_metrics
    report.collision_rate = collisions / report.num_batches if report.num_batches else 0.0
    report.wall_time = time.perf_counter() - started
    return model, report


# --- experiments -----------------------------------------------------------------

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


@dataclass
class ExperimentRow:
    name: str
    metrics: Metrics
    report: TrainReport
    delta: dict[str, float] | None = None

    def as_dict(self) -> dict:
        d = {"setting": self.name}
        d.update({m: getattr(self.metrics, m) for m in METRIC_NAMES})
        if self.delta is not None:
            d.update({f"delta_{m}": self.delta[m] for m in METRIC_NAMES})
        return d


def _run(name: str, config: TrainConfig, train_set, catalog, eval_set, vocab) -> ExperimentRow:
    model, report = train(config, train_set, catalog, eval_set, vocab)
    return ExperimentRow(name, report.final_metrics, report)


def _with_deltas(rows: list[ExperimentRow]) -> list[ExperimentRow]:
    base = rows[0].metrics
    for r in rows:
        r.delta = {m: getattr(r.metrics, m) - getattr(base, m) for m in METRIC_NAMES}
    return rows


ABLATIONS: tuple[tuple[str, dict], ...] = (
    ("full", {}),
    ("w/o entity encoder", {"num_fusion_layers": 0}),
    ("w/o entity position", {"use_positions": False}),
    ("w/o entity type", {"use_types": False}),
    ("w/o relation embedding", {"head": "classification"}),
)


def run_ablation_suite(base_config: TrainConfig, train_set, catalog, eval_set, vocab: Vocab | None = None) -> list[ExperimentRow]:
    """Full model plus the four single-component removals, same seed and data."""
    if base_config.head != "retrieval":
        raise ConfigError("the ablation base must be the full retrieval model")
    vocab = vocab or default_vocab(train_set, catalog, base_config.min_freq)
    rows = []
    for name, changes in ABLATIONS:
        changes = dict(changes)
        head = changes.pop("head", None)
        rows.append(_run(name, base_config.variant(head=head, **changes), train_set, catalog, eval_set, vocab))
    return _with_deltas(rows)


def visual_on_off(base_config: TrainConfig, train_set, catalog, eval_set, vocab: Vocab | None = None) -> list[ExperimentRow]:
    """Same model with and without the visual segment."""
    vocab = vocab or default_vocab(train_set, catalog, base_config.min_freq)
    rows = [
        _run("with visual", base_config.variant(use_visual=True), train_set, catalog, eval_set, vocab),
        _run("w/o visual", base_config.variant(use_visual=False), train_set, catalog, eval_set, vocab),
    ]
    return _with_deltas(rows)


def compare_heads(base_config: TrainConfig, train_set, catalog, eval_set, vocab: Vocab | None = None) -> list[ExperimentRow]:
    """Retrieval vs classification head under identical seed, data and epochs."""
    vocab = vocab or default_vocab(train_set, catalog, base_config.min_freq)
    rows = [
        _run("Retrieval-based", base_config.variant(head="retrieval"), train_set, catalog, eval_set, vocab),
        _run("Classification-based", base_config.variant(head="classification"), train_set, catalog, eval_set, vocab),
    ]
    return _with_deltas(rows)


def sweep_depth(config: TrainConfig, depths: Sequence[int], train_set, catalog, eval_set, vocab: Vocab | None = None) -> list[ExperimentRow]:
    if any(d < 0 for d in depths):
        raise ConfigError("depths must be non-negative")
    vocab = vocab or default_vocab(train_set, catalog, config.min_freq)
    return [
        _run(str(d), config.variant(num_fusion_layers=d), train_set, catalog, eval_set, vocab) for d in depths
    ]


def write_table_csv(rows: list[ExperimentRow], path, first_column: str = "setting") -> None:
    dicts = [r.as_dict() for r in rows]
    for d in dicts:
        d[first_column] = d.pop("setting")
    fields = [first_column] + [k for k in dicts[0] if k != first_column]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(dicts)


def format_table(rows: list[ExperimentRow]) -> str:
    """Plain-text table: one metric row per setting, Delta rows underneath."""
    head = f"{'Setting':<26}" + "".join(f"{m.capitalize():>11}" for m in METRIC_NAMES)
    lines = [head, "-" * len(head)]
    for i, r in enumerate(rows):
        lines.append(f"{r.name:<26}" + "".join(f"{100 * getattr(r.metrics, m):>11.2f}" for m in METRIC_NAMES))
        if i and r.delta is not None:
            lines.append(f"{'  Delta':<26}" + "".join(f"{100 * r.delta[m]:>+11.2f}" for m in METRIC_NAMES))
    return "\n".join(lines)
