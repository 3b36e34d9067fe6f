"""Synthetic multi-task data and a frozen two-layer backbone.

Tasks share a low-rank concept map C: every task's labels are a noisy
argmax readout of a task-specific orthogonal rotation applied to C x. Each
task additionally shifts its input mean along a direction orthogonal to the
rows of C, so task identity is visible in the inputs without touching the
label-relevant subspace; the held-out split's shift direction only partially
overlaps the train split's, standing in for evaluation on related but not
identical task data. ``task_shift=0`` removes per-task input structure
entirely and ``shift_overlap=1`` makes the splits identically distributed.

The backbone is input -> hidden (relu) -> classes with both weight matrices
frozen; only the adapters wrapped around them train.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adapters as adp
from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, LabelError

DEFAULT_HIDDEN_DIM = 64
DEFAULT_CONCEPT_DIM = 12
DEFAULT_LABEL_NOISE = 0.3
DEFAULT_TASK_SHIFT = 0.75
DEFAULT_SHIFT_OVERLAP = 0.5


@dataclass(frozen=True)
class DataConfig:
    """Knobs of the synthetic task generator."""

    tasks: int = 3
    input_dim: int = 32
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    classes: int = 8
    train_per_task: int = 2000
    heldout_per_task: int = 500
    label_noise: float = DEFAULT_LABEL_NOISE
    task_shift: float = DEFAULT_TASK_SHIFT
    shift_overlap: float = DEFAULT_SHIFT_OVERLAP
    concept_dim: int = DEFAULT_CONCEPT_DIM
    seed: int = 0


@dataclass
class SyntheticTaskFamily:
    """Shared concept map plus per-task rotations, shifts, and noise level.

    ``heldout_shifts`` are the task input means used for the held-out split:
    each keeps the train shift's norm but only overlaps its direction by the
    configured ``shift_overlap``, standing in for evaluation on related but
    not identical task data. Overlap 1.0 makes both splits identically
    distributed.
    """

    concept: np.ndarray            # C [hidden x input], rank concept_dim
    rotations: list[np.ndarray]    # orthogonal [hidden x hidden] per task
    readout: np.ndarray            # [classes x hidden]
    shifts: list[np.ndarray]       # per-task input mean, orthogonal to rows of C
    heldout_shifts: list[np.ndarray]
    label_noise: float
    seed: int


@dataclass
class TaskSplit:
    x: np.ndarray        # [input_dim x samples]
    labels: np.ndarray   # int labels [samples]


@dataclass
class TaskData:
    task_id: int
    train: TaskSplit
    heldout: TaskSplit


@dataclass
class TaskBatch:
    """One task's mini-batch, the unit alignment statistics are computed over."""

    task_id: int
    inputs: Tensor       # [input_dim x batch]
    labels: np.ndarray   # int labels [batch]


def _orthonormal_cols(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def make_task_family(num_tasks: int, input_dim: int, num_classes: int, hidden_dim: int,
                     concept_dim: int, label_noise: float, task_shift: float,
                     seed: int, shift_overlap: float = DEFAULT_SHIFT_OVERLAP
                     ) -> SyntheticTaskFamily:
    """Draw the shared and per-task generator components, deterministically.

    The default construction keeps class scores exactly standard normal and
    i.i.d. for every task, so label distributions stay near-uniform: the
    concept map has orthonormal factors, each task's rotation acts inside the
    concept subspace (it is still exactly orthogonal on the full hidden
    space), and the readout is an orthonormal frame pulled back through the
    concept embedding. Task input shifts are orthogonal to the rows of C, so
    they carry task identity without touching the labels; held-out shifts
    keep the same norm but overlap the train direction only by
    ``shift_overlap``.
    """
    if concept_dim < num_classes or concept_dim > min(input_dim, hidden_dim):
        raise ConfigError(f"concept_dim {concept_dim} must lie in "
                          f"[{num_classes}, {min(input_dim, hidden_dim)}]")
    if concept_dim >= input_dim and task_shift > 0:
        raise ConfigError("task_shift > 0 needs concept_dim < input_dim "
                          "(shifts live in the complement of the concept rows)")
    if not 0.0 <= shift_overlap <= 1.0:
        raise ConfigError(f"shift_overlap must lie in [0, 1], got {shift_overlap}")
    streams = np.random.SeedSequence(seed).spawn(3 + 3 * num_tasks)
    rng_concept = np.random.default_rng(streams[0])
    up = _orthonormal_cols(rng_concept, hidden_dim, concept_dim)
    down = _orthonormal_cols(rng_concept, input_dim, concept_dim).T
    concept = up @ down
    frame = _orthonormal_cols(np.random.default_rng(streams[1]), concept_dim, num_classes).T
    readout = frame @ up.T
    complement = np.eye(hidden_dim) - up @ up.T

    def off_concept_direction(rng: np.random.Generator, avoid: np.ndarray | None = None):
        raw = rng.standard_normal(input_dim)
        raw = raw - down.T @ (down @ raw)  # remove the label-relevant component
        if avoid is not None:
            raw = raw - avoid * (avoid @ raw)
        norm = np.linalg.norm(raw)
        return raw / norm if norm > 0 else np.zeros(input_dim)

    rotations, shifts, heldout_shifts = [], [], []
    for t in range(num_tasks):
        latent_rot = _orthonormal_cols(np.random.default_rng(streams[3 + 3 * t]),
                                       concept_dim, concept_dim)
        rotations.append(up @ latent_rot @ up.T + complement)
        direction = off_concept_direction(np.random.default_rng(streams[3 + 3 * t + 1]))
        shifts.append(task_shift * direction)
        fresh = off_concept_direction(np.random.default_rng(streams[3 + 3 * t + 2]),
                                      avoid=direction)
        drifted = shift_overlap * direction + math.sqrt(1.0 - shift_overlap ** 2) * fresh
        heldout_shifts.append(task_shift * drifted)
    return SyntheticTaskFamily(concept=concept, rotations=rotations, readout=readout,
                               shifts=shifts, heldout_shifts=heldout_shifts,
                               label_noise=label_noise, seed=seed)


def family_logits(family: SyntheticTaskFamily, task_id: int, x: np.ndarray,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Noisy class scores the generator labels with; noiseless when rng is None."""
    clean = family.readout @ (family.rotations[task_id] @ (family.concept @ x))
    if rng is None or family.label_noise == 0.0:
        return clean
    return clean + family.label_noise * rng.standard_normal(clean.shape)


def gen_tasks(num_tasks: int, input_dim: int, num_classes: int,
              samples_per_split: tuple[int, int] = (2000, 500),
              label_noise: float = DEFAULT_LABEL_NOISE, seed: int = 0,
              hidden_dim: int = DEFAULT_HIDDEN_DIM, concept_dim: int = DEFAULT_CONCEPT_DIM,
              task_shift: float = DEFAULT_TASK_SHIFT,
              shift_overlap: float = DEFAULT_SHIFT_OVERLAP) -> list[TaskData]:
    """Per-task (train, held-out) datasets, deterministic per seed.

    Both splits draw from one stream per task (so they are disjoint by
    construction) and share the task's labeling rule; the held-out split uses
    the task's drifted input shift.
    """
    if num_tasks < 1:
        raise ConfigError(f"need at least one task, got {num_tasks}")
    if num_classes < 2:
        raise ConfigError(f"need at least two classes, got {num_classes}")
    if input_dim < 2 or hidden_dim < 2:
        raise ConfigError(f"degenerate dims: input_dim={input_dim}, hidden_dim={hidden_dim}")
    n_train, n_held = samples_per_split
    if n_train < 1 or n_held < 0:
        raise ConfigError(f"samples_per_split must be positive, got {samples_per_split}")
    family = make_task_family(num_tasks, input_dim, num_classes, hidden_dim,
                              concept_dim, label_noise, task_shift, seed, shift_overlap)
    sample_streams = np.random.SeedSequence(seed).spawn(3 + 3 * num_tasks + num_tasks)
    datasets = []
    for t in range(num_tasks):
        rng = np.random.default_rng(sample_streams[3 + 3 * num_tasks + t])
        z = rng.standard_normal((input_dim, n_train + n_held))
        x = np.empty_like(z)
        x[:, :n_train] = z[:, :n_train] + family.shifts[t][:, None]
        x[:, n_train:] = z[:, n_train:] + family.heldout_shifts[t][:, None]
        labels = family_logits(family, t, x, rng).argmax(axis=0)
        datasets.append(TaskData(
            task_id=t,
            train=TaskSplit(x=x[:, :n_train].copy(), labels=labels[:n_train].copy()),
            heldout=TaskSplit(x=x[:, n_train:].copy(), labels=labels[n_train:].copy()),
        ))
    return datasets


def generate_datasets(cfg: DataConfig) -> list[TaskData]:
    return gen_tasks(cfg.tasks, cfg.input_dim, cfg.classes,
                     samples_per_split=(cfg.train_per_task, cfg.heldout_per_task),
                     label_noise=cfg.label_noise, seed=cfg.seed, hidden_dim=cfg.hidden_dim,
                     concept_dim=cfg.concept_dim, task_shift=cfg.task_shift,
                     shift_overlap=cfg.shift_overlap)


def split_fingerprint(split: TaskSplit) -> set[str]:
    """Hashes of every sample, for split-disjointness checks."""
    return {hashlib.sha256(split.x[:, i].tobytes()).hexdigest() for i in range(split.x.shape[1])}


# ---------------------------------------------------------------------------
# Backbone


@dataclass
class Backbone:
    """input -> hidden (relu) -> classes, with an adapter on each weight."""

    input_dim: int
    hidden_dim: int
    num_classes: int
    adapters: list[adp.AdapterState]

    def trainable_params(self) -> list[Tensor]:
        params: list[Tensor] = []
        for state in self.adapters:
            params.extend(state.trainable())
        return params


def build_backbone(specs: list[adp.AdapterSpec], input_dim: int, hidden_dim: int,
                   num_classes: int, seed: int) -> Backbone:
    """Frozen random backbone with one adapter per weight, deterministic per seed.

    ``specs`` holds one adapter spec per layer ([hidden, readout] order); a
    single-entry list is applied to both layers.
    """
    if len(specs) == 1:
        specs = [specs[0], specs[0]]
    if len(specs) != 2:
        raise ConfigError(f"backbone has 2 adapted layers, got {len(specs)} specs")
    streams = np.random.SeedSequence(seed).spawn(4)
    dims = [(hidden_dim, input_dim), (num_classes, hidden_dim)]
    states = []
    for layer, ((m, n), spec) in enumerate(zip(dims, specs)):
        w = np.random.default_rng(streams[layer]).normal(0.0, 1.0 / np.sqrt(n), size=(m, n))
        layer_seed = int(np.random.SeedSequence([seed, layer]).generate_state(1)[0])
        spec = adp.AdapterSpec(variant=spec.variant, rank=spec.rank, num_heads=spec.num_heads,
                               alpha=spec.alpha, dropout_p=spec.dropout_p, top_k=spec.top_k,
                               seed=layer_seed)
        states.append(adp.init_adapter(spec, m, n, seed=layer_seed, base_weight=w))
    return Backbone(input_dim=input_dim, hidden_dim=hidden_dim, num_classes=num_classes,
                    adapters=states)


def forward(model: Backbone, x: Tensor, mode: str = "train", step: int = 0,
            collect_features: bool = False) -> tuple[Tensor, dict[int, Tensor]]:
    """Class logits for a column batch, optionally with per-layer features.

    Features are the clean down-projection outputs A x (pre-dropout),
    transposed to [batch x rank] rows, keyed by layer id. For the
    multi-adapter variant there is no shared down-projection, so feature
    collection is rejected.
    """
    if x.data.ndim != 2 or x.shape[0] != model.input_dim:
        raise ConfigError(f"input must be [{model.input_dim} x batch], got shape {x.shape}")
    features: dict[int, Tensor] = {}
    h = x
    for layer, state in enumerate(model.adapters):
        if collect_features:
            if state.spec.variant == adp.MULTI_ADAPTER:
                raise ConfigError("feature extraction needs a shared down-projection; "
                                  "multi_adapter has one per expert")
            features[layer] = ad.transpose(ad.matmul(state.A[0], h))
        h = adp.adapter_forward(state, h, mode=mode, step=step, layer_id=layer)
        if layer == 0:
            h = ad.relu(h)
    return h, features


def task_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under column-softmax logits."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[0]):
        raise LabelError(f"labels must lie in [0, {logits.shape[0]}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return ad.cross_entropy(logits, labels)


def predict(model: Backbone, x: np.ndarray) -> np.ndarray:
    """Argmax class per column in evaluation mode (ties go to the lowest class)."""
    with ad.no_grad():
        logits, _ = forward(model, Tensor(x), mode="eval")
    return logits.data.argmax(axis=0)


def accuracy(model: Backbone, split: TaskSplit) -> float:
    """Fraction of held-out columns whose argmax prediction matches the label."""
    if split.x.shape[1] == 0:
        raise ConfigError("accuracy needs a non-empty dataset")
    return float((predict(model, split.x) == split.labels).mean())


# ---------------------------------------------------------------------------
# JSON-lines dataset export/import: {"task_id": int, "x": [...], "label": int}


def save_split_jsonl(datasets: list[TaskData], split: str, path: str | Path) -> None:
    if split not in ("train", "heldout"):
        raise ConfigError(f"split must be 'train' or 'heldout', got {split!r}")
    with open(path, "w") as fh:
        for task in datasets:
            part: TaskSplit = getattr(task, split)
            for i in range(part.x.shape[1]):
                fh.write(json.dumps({"task_id": task.task_id,
                                     "x": part.x[:, i].tolist(),
                                     "label": int(part.labels[i])}) + "\n")


def load_split_jsonl(path: str | Path) -> dict[int, TaskSplit]:
    """Read one split back, grouped by task id."""
    rows: dict[int, list[tuple[list[float], int]]] = {}
    with open(path) as fh:
        for line in fh:
            record = json.loads(line)
            rows.setdefault(record["task_id"], []).append((record["x"], record["label"]))
    out = {}
    for task_id, entries in sorted(rows.items()):
        x = np.array([e[0] for e in entries], dtype=np.float64).T
        labels = np.array([e[1] for e in entries], dtype=np.int64)
        out[task_id] = TaskSplit(x=x, labels=labels)
    return out
