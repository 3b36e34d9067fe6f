"""Training loop: task loss plus optional alignment regularizer, Adam updates.

Each step draws one sub-batch per task (fresh seeded permutation per epoch),
averages the per-task cross-entropies, adds ``lam`` times the alignment loss
computed from the clean down-projection features, and applies one Adam
update under a linear-warmup / cosine-decay schedule. Everything is
deterministic given the config seed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import adapters as adp
from . import alignment as align
from . import analysis
from . import autodiff as ad
from . import harness
from .autodiff import Tensor
from .errors import ConfigError

ALIGN_MODES = ("none", "kl", "mmd")
DEFAULT_LAMBDA = {"none": 0.0, "kl": 0.1, "mmd": 0.15}


@dataclass
class TrainConfig:
    """Full specification of one training run."""

    variant: str = adp.VANILLA
    rank: tuple[int, ...] = (8,)          # per adapted layer; single entry broadcasts
    num_heads: int = 1
    alpha: float = 32.0
    dropout_p: float = 0.0
    top_k: int | None = None
    align_mode: str = "none"
    lam: float | None = None              # defaults per align_mode when omitted
    align_layers: tuple[int, ...] | None = None   # None = all adapted layers
    var_floor: float = align.DEFAULT_VAR_FLOOR
    bandwidth_scales: tuple[float, ...] = align.DEFAULT_BANDWIDTH_SCALES
    lr: float = 2e-4
    steps: int = 2000
    warmup_ratio: float = 0.03
    batch_per_task: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    seed: int | None = None
    log_every: int = 1
    data: harness.DataConfig = field(default_factory=harness.DataConfig)

    def __post_init__(self):
        if isinstance(self.rank, int):
            self.rank = (self.rank,)
        else:
            self.rank = tuple(int(r) for r in self.rank)
        self.bandwidth_scales = tuple(float(s) for s in self.bandwidth_scales)
        if self.align_layers is not None:
            self.align_layers = tuple(int(l) for l in self.align_layers)
        if self.align_mode not in ALIGN_MODES:
            raise ConfigError(f"align_mode must be one of {ALIGN_MODES}, got {self.align_mode!r}")
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA[self.align_mode]
        if self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if len(self.rank) not in (1, 2):
            raise ConfigError(f"rank takes one value or one per layer, got {self.rank}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_per_task < 1:
            raise ConfigError(f"batch_per_task must be positive, got {self.batch_per_task}")
        if self.align_mode != "none" and self.batch_per_task < 8:
            raise ConfigError(f"alignment needs batch_per_task >= 8, got {self.batch_per_task}")
        if self.align_mode != "none" and self.data.tasks < 2:
            raise ConfigError(f"alignment needs at least 2 tasks, got {self.data.tasks}")
        if self.align_mode != "none" and self.variant == adp.MULTI_ADAPTER:
            raise ConfigError("alignment needs a shared down-projection; "
                              "multi_adapter has one per expert")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be positive, got {self.log_every}")

    def layer_specs(self) -> list[adp.AdapterSpec]:
        ranks = self.rank if len(self.rank) == 2 else self.rank * 2
        return [adp.AdapterSpec(variant=self.variant, rank=r, num_heads=self.num_heads,
                                alpha=self.alpha, dropout_p=self.dropout_p, top_k=self.top_k,
                                seed=self.seed or 0)
                for r in ranks]

    def to_dict(self) -> dict:
        doc = {
            "adapter": {"variant": self.variant, "rank": list(self.rank),
                        "num_heads": self.num_heads, "alpha": self.alpha,
                        "dropout_p": self.dropout_p, "top_k": self.top_k},
            "align": {"mode": self.align_mode, "lam": self.lam,
                      "layers": None if self.align_layers is None else list(self.align_layers),
                      "var_floor": self.var_floor,
                      "bandwidth_scales": list(self.bandwidth_scales)},
            "optim": {"lr": self.lr, "steps": self.steps, "warmup_ratio": self.warmup_ratio,
                      "batch_per_task": self.batch_per_task, "beta1": self.beta1,
                      "beta2": self.beta2, "adam_eps": self.adam_eps,
                      "grad_clip": self.grad_clip},
            "data": asdict(self.data),
            "seed": self.seed,
            "log_every": self.log_every,
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        def section(name: str, required: bool = False) -> dict:
            value = doc.get(name, None)
            if value is None:
                if required:
                    raise ConfigError(f"missing required config section '{name}'")
                return {}
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{name}' must be an object")
            return value

        adapter = section("adapter", required=True)
        if "variant" not in adapter:
            raise ConfigError("missing required config field 'adapter.variant'")
        if "rank" not in adapter:
            raise ConfigError("missing required config field 'adapter.rank'")
        align_sec = section("align")
        optim = section("optim")
        data_sec = section("data")
        known_data = {f for f in harness.DataConfig.__dataclass_fields__}
        unknown = set(data_sec) - known_data
        if unknown:
            raise ConfigError(f"unknown data config field(s): {sorted(unknown)}")
        try:
            return cls(
                variant=adapter["variant"],
                rank=adapter["rank"],
                num_heads=adapter.get("num_heads", 1),
                alpha=adapter.get("alpha", 32.0),
                dropout_p=adapter.get("dropout_p", 0.0),
                top_k=adapter.get("top_k"),
                align_mode=align_sec.get("mode", "none"),
                lam=align_sec.get("lam"),
                align_layers=align_sec.get("layers"),
                var_floor=align_sec.get("var_floor", align.DEFAULT_VAR_FLOOR),
                bandwidth_scales=tuple(align_sec.get("bandwidth_scales",
                                                     align.DEFAULT_BANDWIDTH_SCALES)),
                lr=optim.get("lr", 2e-4),
                steps=optim.get("steps", 2000),
                warmup_ratio=optim.get("warmup_ratio", 0.03),
                batch_per_task=optim.get("batch_per_task", 16),
                beta1=optim.get("beta1", 0.9),
                beta2=optim.get("beta2", 0.999),
                adam_eps=optim.get("adam_eps", 1e-8),
                grad_clip=optim.get("grad_clip"),
                seed=doc.get("seed"),
                log_every=doc.get("log_every", 1),
                data=harness.DataConfig(**data_sec),
            )
        except TypeError as err:
            raise ConfigError(f"malformed config: {err}") from None


def load_config(path: str | Path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return TrainConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# Schedule and optimizer


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``lr``, then cosine decay to 0 at the final step."""
    if not 0 <= step < config.steps:
        raise IndexError(f"step {step} out of range [0, {config.steps})")
    warmup = math.ceil(config.warmup_ratio * config.steps)
    if step < warmup:
        return config.lr * step / warmup
    last = config.steps - 1
    if last == warmup:
        return config.lr  # the warmup junction is also the final step
    progress = (step - warmup) / (last - warmup)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Standard Adam with bias correction and optional global-norm clipping."""

    def __init__(self, params: list[Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, grad_clip: float | None = None):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.grad_clip is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > self.grad_clip:
                grads = [g * (self.grad_clip / total) for g in grads]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None


# ---------------------------------------------------------------------------
# Reports


@dataclass
class StepRecord:
    step: int
    lr: float
    loss_task: float
    loss_align: float
    loss_total: float


@dataclass
class RunReport:
    records: list[StepRecord]
    final: dict


def write_report_jsonl(report: RunReport, path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in report.records:
            fh.write(json.dumps(asdict(rec)) + "\n")


def write_summary_json(report: RunReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.final, indent=2))


# ---------------------------------------------------------------------------
# Steps and runs


class _TaskSampler:
    """Round-robin mini-batches with a fresh permutation per epoch.

    A trailing partial batch is discarded: the epoch reshuffles instead.
    """

    def __init__(self, split: harness.TaskSplit, batch: int, rng: np.random.Generator):
        if split.x.shape[1] < batch:
            raise ConfigError(f"task has {split.x.shape[1]} train samples, batch needs {batch}")
        self.split = split
        self.batch = batch
        self.rng = rng
        self._perm = rng.permutation(split.x.shape[1])
        self._cursor = 0

    def next_indices(self) -> np.ndarray:
        if self._cursor + self.batch > self._perm.size:
            self._perm = self.rng.permutation(self.split.x.shape[1])
            self._cursor = 0
        idx = self._perm[self._cursor:self._cursor + self.batch]
        self._cursor += self.batch
        return idx


def _collect_alignment_loss(config: TrainConfig, feats_by_layer: dict[int, list[align.TaskFeatures]]):
    """Alignment loss averaged over the selected layers (graph-attached)."""
    layers = sorted(feats_by_layer) if config.align_layers is None else list(config.align_layers)
    missing = [l for l in layers if l not in feats_by_layer]
    if missing:
        raise ConfigError(f"align.layers names unadapted layer(s) {missing}")
    per_layer = []
    for layer in layers:
        feats = feats_by_layer[layer]
        if config.align_mode == "kl":
            stats = [align.batch_gaussian_stats(f, config.var_floor) for f in feats]
            per_layer.append(align.kl_align_loss(stats))
        else:
            pooled = np.vstack([f.features.data for f in feats])
            bank = align.KernelBank.from_median(align.median_bandwidth(pooled),
                                                config.bandwidth_scales)
            per_layer.append(align.mk_mmd_loss(feats, bank))
    total = per_layer[0]
    for term in per_layer[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(per_layer))


def train_step(model: harness.Backbone, batches: list[harness.TaskBatch], config: TrainConfig,
               step: int, optimizer: Adam) -> StepRecord:
    """One optimization step over one sub-batch per task."""
    align_on = config.align_mode != "none"
    if align_on:
        if len(batches) < 2:
            raise ConfigError(f"alignment needs at least 2 task batches, got {len(batches)}")
        small = [b.inputs.shape[1] for b in batches if b.inputs.shape[1] < 8]
        if small:
            raise ConfigError(f"alignment needs batch size >= 8 per task, got {small}")
    task_total = None
    feats_by_layer: dict[int, list[align.TaskFeatures]] = {}
    for batch in batches:
        logits, features = harness.forward(model, batch.inputs, mode="train", step=step,
                                           collect_features=align_on)
        loss = harness.task_loss(logits, batch.labels)
        task_total = loss if task_total is None else ad.add(task_total, loss)
        for layer, f in features.items():
            feats_by_layer.setdefault(layer, []).append(
                align.TaskFeatures(task_id=batch.task_id, features=f, layer_id=layer))
    loss_task = ad.scale(task_total, 1.0 / len(batches))
    loss_align_value = 0.0
    if align_on and config.lam > 0:
        loss_align = _collect_alignment_loss(config, feats_by_layer)
        loss_align_value = loss_align.item()
        loss_total = align.total_loss(loss_task, loss_align, config.lam)
    elif align_on:
        # lam == 0: log the alignment term but keep it out of the graph so the
        # update is bit-identical to align_mode == "none".
        with ad.no_grad():
            loss_align_value = _collect_alignment_loss(config, feats_by_layer).item()
        loss_total = loss_task
    else:
        loss_total = loss_task
    lr = lr_at(step, config)
    record = StepRecord(step=step, lr=lr, loss_task=loss_task.item(),
                        loss_align=loss_align_value, loss_total=loss_total.item())
    ad.backward(loss_total)
    optimizer.step(lr)
    return record


def _final_report(model: harness.Backbone, datasets: list[harness.TaskData],
                  config: TrainConfig, wall_clock: float) -> dict:
    per_task = [harness.accuracy(model, task.heldout) for task in datasets]
    head_sim = None
    if model.adapters[0].spec.num_heads >= 2:
        layers = []
        for state in model.adapters:
            rep = analysis.head_similarity(state.B)
            layers.append({"off_diag_mean": rep.off_diag_mean, "off_diag_median": rep.off_diag_median})
        head_sim = {"layers": layers,
                    "mean_off_diag": float(np.mean([l["off_diag_mean"] for l in layers])),
                    "median_off_diag": float(np.mean([l["off_diag_median"] for l in layers]))}
    centroid = None
    if len(datasets) >= 2 and model.adapters[0].spec.variant != adp.MULTI_ADAPTER:
        distances = []
        with ad.no_grad():
            per_layer_feats: dict[int, list[np.ndarray]] = {}
            for task in datasets:
                _, feats = harness.forward(model, Tensor(task.heldout.x), mode="eval",
                                           collect_features=True)
                for layer, f in feats.items():
                    per_layer_feats.setdefault(layer, []).append(f.data)
        for layer, feats in sorted(per_layer_feats.items()):
            distances.append(analysis.centroid_distance(feats))
        centroid = float(np.mean(distances))
    params = sum(adp.trainable_param_count(state.spec, state.m, state.n)
                 for state in model.adapters)
    return {
        "per_task_accuracy": per_task,
        "mean_accuracy": float(np.mean(per_task)),
        "head_similarity": head_sim,
        "centroid_distance": centroid,
        "trainable_params": int(params),
        "config": config.to_dict(),
        "wall_clock_s": wall_clock,
    }


def train(config: TrainConfig, datasets: list[harness.TaskData] | None = None
          ) -> tuple[harness.Backbone, RunReport]:
    """Run the configured number of steps and evaluate on the held-out splits."""
    if config.seed is None:
        raise ConfigError("missing required config field 'seed'")
    if datasets is None:
        datasets = harness.generate_datasets(config.data)
    started = time.perf_counter()
    model = harness.build_backbone(config.layer_specs(), config.data.input_dim,
                                   config.data.hidden_dim, config.data.classes, config.seed)
    optimizer = Adam(model.trainable_params(), beta1=config.beta1, beta2=config.beta2,
                     eps=config.adam_eps, grad_clip=config.grad_clip)
    sampler_streams = np.random.SeedSequence([config.seed, len(datasets)]).spawn(len(datasets))
    samplers = [_TaskSampler(task.train, config.batch_per_task,
                             np.random.default_rng(stream))
                for task, stream in zip(datasets, sampler_streams)]
    records = []
    for step in range(config.steps):
        batches = []
        for task, sampler in zip(datasets, samplers):
            idx = sampler.next_indices()
            batches.append(harness.TaskBatch(task_id=task.task_id,
                                             inputs=Tensor(task.train.x[:, idx]),
                                             labels=task.train.labels[idx]))
        record = train_step(model, batches, config, step, optimizer)
        if step % config.log_every == 0 or step == config.steps - 1:
            records.append(record)
    final = _final_report(model, datasets, config, time.perf_counter() - started)
    return model, RunReport(records=records, final=final)
