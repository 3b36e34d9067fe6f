"""Low-rank adapter variants over a frozen base weight.

Every variant keeps the base weight W [m x n] frozen and trains a low-rank
update built from a down-projection A [r x n] and up-projection heads
B_i [m x r], optionally mixed by a learned router. Output deltas carry the
conventional alpha/rank scaling so merged weights are well defined.

Variants:

* ``vanilla``              one (A, B) pair, no router; mergeable.
* ``multi_head_routed``    shared A, N heads, softmax router over heads.
* ``multi_head_randomized``  routed plus randomized head init and per-head
                           input dropout during training.
* ``multi_head_sum``       shared A, randomized heads, per-head dropout,
                           aggregation by plain summation (no router);
                           mergeable once dropout is off (evaluation).
* ``multi_adapter``        N independent (A_i, B_i) experts with top-k
                           softmax gating.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NotMergeableError, StateError, VariantError

VANILLA = "vanilla"
MULTI_ADAPTER = "multi_adapter"
MULTI_HEAD_ROUTED = "multi_head_routed"
MULTI_HEAD_RANDOMIZED = "multi_head_randomized"
MULTI_HEAD_SUM = "multi_head_sum"

VARIANTS = (VANILLA, MULTI_ADAPTER, MULTI_HEAD_ROUTED, MULTI_HEAD_RANDOMIZED, MULTI_HEAD_SUM)

# Variants whose weight update depends on the input through a router.
ROUTED_VARIANTS = (MULTI_ADAPTER, MULTI_HEAD_ROUTED, MULTI_HEAD_RANDOMIZED)

# Variants whose forward applies per-head dropout during training.
DROPOUT_VARIANTS = (MULTI_HEAD_RANDOMIZED, MULTI_HEAD_SUM)

# Head matrices start at small random values instead of zero for these.
RANDOM_HEAD_VARIANTS = (MULTI_HEAD_RANDOMIZED, MULTI_HEAD_SUM)


@dataclass(frozen=True)
class AdapterSpec:
    """Static configuration of one adapted layer."""

    variant: str
    rank: int
    num_heads: int = 1
    alpha: float = 32.0
    dropout_p: float = 0.0
    top_k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown adapter variant {self.variant!r}; expected one of {VARIANTS}")
        if self.rank < 1:
            raise ConfigError(f"rank must be a positive integer, got {self.rank}")
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be a positive integer, got {self.num_heads}")
        if self.variant == VANILLA and self.num_heads != 1:
            raise ConfigError(f"vanilla adapters have exactly one head, got num_heads={self.num_heads}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.variant == MULTI_ADAPTER:
            if self.top_k is None:
                raise ConfigError("multi_adapter requires top_k")
            if not 1 <= self.top_k <= self.num_heads:
                raise ConfigError(f"top_k={self.top_k} must lie in [1, num_heads={self.num_heads}]")
        elif self.top_k is not None:
            raise ConfigError(f"top_k only applies to multi_adapter, got variant {self.variant!r}")
        if self.dropout_p > 0.0 and self.variant not in DROPOUT_VARIANTS:
            raise ConfigError(
                f"dropout_p > 0 only applies to {DROPOUT_VARIANTS}, got variant {self.variant!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


@dataclass
class AdapterState:
    """Realized matrices for one adapted layer.

    ``A`` holds one shared down-projection for every variant except
    ``multi_adapter``, which stores one per expert. ``W`` is frozen and
    never trains; A, B and the router are the trainable leaves.
    """

    spec: AdapterSpec
    W: Tensor
    A: list[Tensor]
    B: list[Tensor]
    router: Tensor | None = None

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def n(self) -> int:
        return self.W.shape[1]

    def trainable(self) -> list[Tensor]:
        params = list(self.A) + list(self.B)
        if self.router is not None:
            params.append(self.router)
        return params


@dataclass(frozen=True)
class MergeResult:
    """Base weight with the input-independent update folded in."""

    merged: Tensor


def init_adapter(spec: AdapterSpec, m: int, n: int, seed: int | None = None,
                 base_weight: np.ndarray | Tensor | None = None) -> AdapterState:
    """Build the adapter state for an m x n layer, deterministically per seed.

    Down-projections draw from N(0, 1/n). Heads start at zero except for the
    randomized variants, which draw each head from N(0, 1e-4) under an
    independent sub-seed. Routers start at zero (uniform routing). The frozen
    base weight defaults to zeros when none is supplied.
    """
    if m < 1 or n < 1:
        raise ConfigError(f"layer dims must be positive, got {m} x {n}")
    if spec.rank > min(m, n):
        raise ConfigError(f"rank {spec.rank} exceeds min(m, n) = {min(m, n)} for a {m} x {n} layer")
    seed = spec.seed if seed is None else seed
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    root = np.random.SeedSequence(seed)
    num_a = spec.num_heads if spec.variant == MULTI_ADAPTER else 1
    streams = root.spawn(num_a + spec.num_heads)
    a_std = 1.0 / np.sqrt(n)
    A = [
        Tensor(np.random.default_rng(streams[i]).normal(0.0, a_std, size=(spec.rank, n)),
               requires_grad=True)
        for i in range(num_a)
    ]
    if spec.variant in RANDOM_HEAD_VARIANTS:
        head_std = 1e-2  # variance 1e-4
        B = [
            Tensor(np.random.default_rng(streams[num_a + i]).normal(0.0, head_std, size=(m, spec.rank)),
                   requires_grad=True)
            for i in range(spec.num_heads)
        ]
    else:
        B = [Tensor(np.zeros((m, spec.rank)), requires_grad=True) for _ in range(spec.num_heads)]
    router = None
    if spec.variant in ROUTED_VARIANTS:
        router = Tensor(np.zeros((spec.num_heads, n)), requires_grad=True)
    if base_weight is None:
        W = Tensor(np.zeros((m, n)))
    else:
        W = base_weight if isinstance(base_weight, Tensor) else Tensor(base_weight)
        if W.shape != (m, n):
            raise ConfigError(f"base weight shape {W.shape} does not match layer dims {m} x {n}")
        if W.requires_grad:
            raise ConfigError("the base weight is frozen and must not require gradients")
    return AdapterState(spec=spec, W=W, A=A, B=B, router=router)


def _head_rng(spec: AdapterSpec, step: int, layer_id: int, head: int) -> np.random.Generator:
    # Mask stream keyed by (seed, step, layer, head): reproducible per call.
    return np.random.default_rng(np.random.SeedSequence([spec.seed, step, layer_id, head]))


def _require_variant(state: AdapterState, allowed: tuple[str, ...], op: str) -> None:
    if state.spec.variant not in allowed:
        raise VariantError(f"{op} expects variant in {allowed}, got {state.spec.variant!r}")


def vanilla_forward(state: AdapterState, x: Tensor) -> Tensor:
    """h = W x + (alpha / rank) * B (A x)."""
    _require_variant(state, (VANILLA,), "vanilla_forward")
    delta = ad.matmul(state.B[0], ad.matmul(state.A[0], x))
    return ad.add(ad.matmul(state.W, x), ad.scale(delta, state.spec.alpha / state.spec.rank))


def multihead_routed_forward(state: AdapterState, x: Tensor, mode: str = "train",
                             step: int = 0, layer_id: int = 0) -> Tensor:
    """Router-weighted sum of head outputs over a shared down-projection.

    Weights are a per-column softmax of router logits. The randomized
    variant additionally drops out each head's view of A x during training.
    """
    _require_variant(state, (MULTI_HEAD_ROUTED, MULTI_HEAD_RANDOMIZED), "multihead_routed_forward")
    if state.router is None:
        raise StateError("routed forward needs a router matrix, found none")
    _check_mode(mode)
    spec = state.spec
    weights = ad.softmax(ad.matmul(state.router, x), axis=0)
    ax = ad.matmul(state.A[0], x)
    use_dropout = (spec.variant == MULTI_HEAD_RANDOMIZED and mode == "train" and spec.dropout_p > 0)
    acc = None
    for i, head in enumerate(state.B):
        head_in = ax
        if use_dropout:
            head_in = ad.dropout(ax, spec.dropout_p, _head_rng(spec, step, layer_id, i))
        term = ad.scale_columns(ad.matmul(head, head_in), ad.row(weights, i))
        acc = term if acc is None else ad.add(acc, term)
    return ad.add(ad.matmul(state.W, x), ad.scale(acc, spec.alpha / spec.rank))


def multiadapter_forward(state: AdapterState, x: Tensor, mode: str = "train") -> Tensor:
    """Top-k gated mixture of independent (A_i, B_i) experts."""
    _require_variant(state, (MULTI_ADAPTER,), "multiadapter_forward")
    if state.router is None:
        raise StateError("multi_adapter forward needs a router matrix, found none")
    _check_mode(mode)
    spec = state.spec
    weights = ad.topk_softmax(ad.matmul(state.router, x), spec.top_k, axis=0)
    acc = None
    for i, head in enumerate(state.B):
        term = ad.scale_columns(ad.matmul(head, ad.matmul(state.A[i], x)), ad.row(weights, i))
        acc = term if acc is None else ad.add(acc, term)
    return ad.add(ad.matmul(state.W, x), ad.scale(acc, spec.alpha / spec.rank))


def multihead_sum_forward(state: AdapterState, x: Tensor, mode: str = "train",
                          step: int = 0, layer_id: int = 0) -> Tensor:
    """Router-free aggregation: heads are summed, not averaged.

    With all heads equal the delta is N times the single-head delta; the
    magnification is intentional and documented. Per-head dropout on A x
    differentiates head inputs during training only.
    """
    _require_variant(state, (MULTI_HEAD_SUM,), "multihead_sum_forward")
    _check_mode(mode)
    spec = state.spec
    ax = ad.matmul(state.A[0], x)
    use_dropout = mode == "train" and spec.dropout_p > 0
    acc = None
    for i, head in enumerate(state.B):
        head_in = ax
        if use_dropout:
            head_in = ad.dropout(ax, spec.dropout_p, _head_rng(spec, step, layer_id, i))
        term = ad.matmul(head, head_in)
        acc = term if acc is None else ad.add(acc, term)
    return ad.add(ad.matmul(state.W, x), ad.scale(acc, spec.alpha / spec.rank))


def adapter_forward(state: AdapterState, x: Tensor, mode: str = "train",
                    step: int = 0, layer_id: int = 0) -> Tensor:
    """Dispatch to the variant's forward."""
    variant = state.spec.variant
    if variant == VANILLA:
        return vanilla_forward(state, x)
    if variant in (MULTI_HEAD_ROUTED, MULTI_HEAD_RANDOMIZED):
        return multihead_routed_forward(state, x, mode=mode, step=step, layer_id=layer_id)
    if variant == MULTI_ADAPTER:
        return multiadapter_forward(state, x, mode=mode)
    return multihead_sum_forward(state, x, mode=mode, step=step, layer_id=layer_id)


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def merge(state: AdapterState) -> MergeResult:
    """Fold the input-independent update into the base weight.

    Only variants whose delta does not depend on the input can merge; the
    merged weight reproduces the adapter's evaluation-mode outputs. Routed
    variants raise ``NotMergeableError``.
    """
    variant = state.spec.variant
    if variant in ROUTED_VARIANTS:
        raise NotMergeableError("input-dependent routing")
    scale = state.spec.alpha / state.spec.rank
    if variant == VANILLA:
        delta = state.B[0].data @ state.A[0].data
    else:  # multi_head_sum with dropout off in evaluation
        delta = sum(head.data for head in state.B) @ state.A[0].data
    return MergeResult(merged=Tensor(state.W.data + scale * delta))


def trainable_param_count(spec: AdapterSpec, m: int, n: int) -> int:
    """Number of trainable scalar entries the variant realizes on an m x n layer."""
    r, heads = spec.rank, spec.num_heads
    if spec.variant == VANILLA:
        return r * (m + n)
    if spec.variant == MULTI_HEAD_SUM:
        return r * n + heads * m * r
    if spec.variant in (MULTI_HEAD_ROUTED, MULTI_HEAD_RANDOMIZED):
        return r * n + heads * m * r + heads * n
    return heads * r * (m + n) + heads * n  # multi_adapter


def matched_vanilla_ranks(budget: int, dims: list[tuple[int, int]]) -> list[int]:
    """Largest common vanilla rank (capped per layer) fitting a parameter budget.

    Returns one rank per layer: min(r*, min(m, n)) for the largest r* whose
    total vanilla parameter count stays within ``budget``.
    """
    if budget < 1 or not dims:
        raise ConfigError("matched_vanilla_ranks needs a positive budget and at least one layer")

    def total(r: int) -> int:
        return sum(min(r, min(m, n)) * (m + n) for m, n in dims)

    best = 0
    r = 1
    while total(r) <= budget and r <= max(min(m, n) for m, n in dims):
        best = r
        r += 1
    if best == 0:
        raise ConfigError(f"budget {budget} cannot fit rank-1 adapters on layers {dims}")
    return [min(best, min(m, n)) for m, n in dims]


# ---------------------------------------------------------------------------
# Checkpoint serialization: one JSON document per adapted layer, arrays as
# base64-encoded little-endian float64.


def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode_array(doc: dict) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(doc["data"]), dtype="<f8")
    return raw.reshape(doc["shape"]).astype(np.float64)


def state_to_doc(state: AdapterState) -> dict:
    spec = state.spec
    return {
        "variant": spec.variant,
        "spec": {
            "rank": spec.rank,
            "num_heads": spec.num_heads,
            "alpha": spec.alpha,
            "dropout_p": spec.dropout_p,
            "top_k": spec.top_k,
            "seed": spec.seed,
        },
        "m": state.m,
        "n": state.n,
        "W": _encode_array(state.W.data),
        "A": [_encode_array(a.data) for a in state.A],
        "B": [_encode_array(b.data) for b in state.B],
        "router": None if state.router is None else _encode_array(state.router.data),
    }


def state_from_doc(doc: dict) -> AdapterState:
    try:
        spec = AdapterSpec(variant=doc["variant"], **doc["spec"])
        state = AdapterState(
            spec=spec,
            W=Tensor(_decode_array(doc["W"])),
            A=[Tensor(_decode_array(a), requires_grad=True) for a in doc["A"]],
            B=[Tensor(_decode_array(b), requires_grad=True) for b in doc["B"]],
            router=None if doc.get("router") is None else Tensor(_decode_array(doc["router"]),
                                                                 requires_grad=True),
        )
    except KeyError as missing:
        raise ConfigError(f"checkpoint document is missing field {missing}") from None
    if spec.variant in ROUTED_VARIANTS and state.router is None:
        raise ConfigError(f"checkpoint for {spec.variant!r} lacks its router matrix")
    return state


def save_checkpoint(states: list[AdapterState], path: str | Path) -> None:
    doc = {"layers": [state_to_doc(s) for s in states]}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> list[AdapterState]:
    doc = json.loads(Path(path).read_text())
    if "layers" not in doc:
        raise ConfigError("checkpoint file is missing field 'layers'")
    return [state_from_doc(layer) for layer in doc["layers"]]
