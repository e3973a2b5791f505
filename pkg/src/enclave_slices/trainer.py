"""Slice training, alpha- and magnitude-guided iterative pruning, dynamic attention."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Adam, Tensor, make_rng
from .data import Dataset
from .errors import ContractError, InputError
from .graph import (
    GraphSpec,
    SliceAdapter,
    accuracy,
    build_backbone,
    enable_linear_attention,
    forward_with_taps,
    fresh_classifier,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    batch_size: int = 64
    optimizer: str = "adam"  # "adam" | "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class PruneConfig:
    delta: float = 0.01
    alpha_setup: float = 0.05
    n: int = 1
    rounds: int = 30
    lambda_complexity: float = 1e-3
    retrain_epochs: int = 2

    def __post_init__(self):
        if not 0 <= self.delta < 1:
            raise ContractError("delta must lie in [0, 1)")
        if self.n < 1 or self.rounds < 1:
            raise ContractError("n and rounds must be >= 1")


@dataclass
class AccuracyBudget:
    acc_vic: float
    delta: float

    @property
    def acc_tol(self) -> float:
        return (1 - self.delta) * self.acc_vic


def _optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    return Adam(params, cfg.lr)


def fit(
    g: GraphSpec,
    data: Dataset,
    cfg: TrainConfig,
    params: list[Tensor] | None = None,
    penalty: Callable[[GraphSpec], Tensor] | None = None,
    stream: str = "fit",
    after_step: Callable[[], None] | None = None,
) -> list[float]:
    """Minibatch training of ``params`` (default: every trainable tensor); returns epoch losses."""
    if len(data) == 0:
        raise InputError("cannot train on an empty dataset")
    params = g.trainable() if params is None else params
    if not params or cfg.epochs == 0:
        return []
    opt = _optimizer(params, cfg)
    rng = make_rng(cfg.seed, stream)
    losses = []
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = ad.softmax_cross_entropy(forward_with_taps(g, data.x[idx]), data.y[idx])
            if penalty is not None:
                loss = ad.add(loss, penalty(g))
            opt.zero_grad()
            ad.backward(loss, params)
            opt.step()
            if after_step is not None:
                after_step()
            total += loss.item() * len(idx)
        losses.append(total / n)
    return losses


def pretrain_public(arch: str, data: Dataset, cfg: TrainConfig, seed: int = 0) -> GraphSpec:
    """Train a whole model on the public task; its body becomes the shared backbone."""
    g = build_backbone(arch, data.x.shape[1], data.n_classes, seed=seed)
    g.set_frozen(False, include_head=True)
    fit(g, data, cfg, stream="public")
    g.set_frozen(True, include_head=True)
    g.role = "PUBLIC"
    return g


def with_fresh_head(public: GraphSpec, n_classes: int, seed: int = 0) -> GraphSpec:
    """Public body (frozen) plus a newly initialised trainable head for ``n_classes``."""
    g = public.clone()
    head = g.classifier()
    idx = g.layers.index(head)
    g.layers[idx] = fresh_classifier(head.id, head.dims["c_in"], n_classes, make_rng(seed, "head"))
    g.n_classes = n_classes
    g.set_frozen(True)
    g.role = "BACKBONE"
    return g


def train_victim(public: GraphSpec, data: Dataset, cfg: TrainConfig, seed: int = 0) -> GraphSpec:
    """Conventional fine-tuning of every weight on the private task (the unpartitioned model)."""
    g = with_fresh_head(public, data.n_classes, seed)
    g.set_frozen(False, include_head=True)
    fit(g, data, cfg, stream="victim")
    g.set_frozen(True, include_head=True)
    g.role = "VICTIM"
    return g


def _check_frozen_backbone(g: GraphSpec) -> None:
    for layer in g.layers:
        if layer.kind != "classifier" and any(t.requires_grad for t in layer.weights.values()):
            raise ContractError(f"backbone layer {layer.id} must be frozen before slice training")


def alpha_penalty(weight: float) -> Callable[[GraphSpec], Tensor] | None:
    """``weight * sum|alpha|`` over live trainable importance scalars."""
    if weight == 0:
        return None

    def penalty(g: GraphSpec) -> Tensor:
        alphas = [s.alpha for s in g.slices if s.alpha.requires_grad]
        if not alphas:
            return Tensor(np.zeros((), np.float32))
        return ad.scale(ad.tsum(ad.tabs(ad.concat(alphas, axis=0))), weight)

    return penalty


def train_dense(g: GraphSpec, data: Dataset, cfg: TrainConfig, lambda_complexity: float = 1e-3) -> list[float]:
    """Train slices, importance scalars and head in place (CE + lambda * sum|alpha|)."""
    _check_frozen_backbone(g)
    if len(data) == 0:
        raise InputError("cannot train on an empty dataset")
    g.role = "DENSE"
    return fit(g, data, cfg, penalty=alpha_penalty(lambda_complexity), stream="dense")


def lora_magnitude(adapter: SliceAdapter) -> float:
    """Sum of absolute weights across both low-rank factors."""
    return float(sum(np.abs(t.data.astype(np.float64)).sum() for t in adapter.weights.values()))


def alpha_importance(adapter: SliceAdapter) -> float:
    return float(abs(adapter.alpha.data.astype(np.float64)).sum())


def select_smallest(g: GraphSpec, n: int, score: Callable[[SliceAdapter], float]) -> list[tuple]:
    """Keys of the ``n`` lowest-scoring slices; ties resolve by ascending key."""
    ranked = sorted(g.slices, key=lambda s: (score(s), s.key))
    return [s.key for s in ranked[:n]]


@dataclass
class RoundRecord:
    round: int
    live_slices: int
    acc: float
    loss: float
    importance_sum: float
    pruned: list = field(default_factory=list)


@dataclass
class PruneResult:
    model: GraphSpec
    status: str  # "ok" | "below_tolerance"
    acc: float
    acc_tol: float
    dense_slices: int
    history: list[RoundRecord]
    setup_pruned: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "status": self.status,
            "acc": self.acc,
            "acc_tol": self.acc_tol,
            "dense_slices": self.dense_slices,
            "final_slices": len(self.model.slices),
            "setup_pruned": [list(k) for k in self.setup_pruned],
            "rounds": [asdict(r) for r in self.history],
        }


def write_round_log(history: list[RoundRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "live_slices", "acc", "loss", "sum_alpha_or_mag"])
        for r in history:
            w.writerow([r.round, r.live_slices, f"{r.acc:.6f}", f"{r.loss:.6f}", f"{r.importance_sum:.6f}"])


def _prune_loop(
    model: GraphSpec,
    train: Dataset,
    evalset: Dataset,
    budget: AccuracyBudget,
    cfg: PruneConfig,
    train_cfg: TrainConfig,
    score: Callable[[SliceAdapter], float],
    penalty,
    log_path,
) -> tuple[GraphSpec | None, list[RoundRecord]]:
    stored: GraphSpec | None = None
    history: list[RoundRecord] = []
    for r in range(1, cfg.rounds + 1):
        acc = accuracy(model, evalset.x, evalset.y)
        record = RoundRecord(r, len(model.slices), acc, float("nan"), sum(score(s) for s in model.slices))
        if acc > budget.acc_tol:
            stored = model.clone()
            record.pruned = [list(k) for k in select_smallest(model, cfg.n, score)]
            model.remove_slices(tuple(k) for k in record.pruned)
        rcfg = TrainConfig(**{**asdict(train_cfg), "epochs": cfg.retrain_epochs, "seed": train_cfg.seed + r})
        losses = fit(model, train, rcfg, penalty=penalty, stream="retrain")
        record.loss = losses[-1] if losses else float("nan")
        history.append(record)
        log.info("round %d: live=%d acc=%.4f tol=%.4f pruned=%s", r, record.live_slices, acc, budget.acc_tol, record.pruned)
    if log_path is not None:
        write_round_log(history, log_path)
    return stored, history


def iterative_prune(
    m_dense: GraphSpec,
    train: Dataset,
    evalset: Dataset,
    budget: AccuracyBudget,
    cfg: PruneConfig | None = None,
    train_cfg: TrainConfig | None = None,
    log_path=None,
) -> PruneResult:
    """Importance-guided pruning: setup threshold on |alpha|, then prune-and-retrain rounds.

    Each round first measures eval accuracy; only when it exceeds the tolerance is
    the current model stored and its ``n`` least important slices removed.  The
    last stored model is returned.
    """
    cfg = cfg or PruneConfig()
    train_cfg = train_cfg or TrainConfig()
    if len(train) == 0 or len(evalset) == 0:
        raise InputError("pruning needs non-empty train and eval splits")
    model = m_dense.clone()
    dense_count = len(model.slices)
    setup = [s.key for s in model.slices if alpha_importance(s) < cfg.alpha_setup]
    model.remove_slices(setup)
    after_setup = model.clone()
    stored, history = _prune_loop(
        model, train, evalset, budget, cfg, train_cfg, alpha_importance, alpha_penalty(cfg.lambda_complexity), log_path
    )
    return _finish(stored, after_setup, evalset, budget, dense_count, history, setup)


def magnitude_prune_lora(
    m_dense: GraphSpec,
    train: Dataset,
    evalset: Dataset,
    budget: AccuracyBudget,
    cfg: PruneConfig | None = None,
    train_cfg: TrainConfig | None = None,
    log_path=None,
) -> PruneResult:
    """Same control flow as :func:`iterative_prune`, ranked by adapter weight magnitude, no setup step."""
    cfg = cfg or PruneConfig()
    train_cfg = train_cfg or TrainConfig()
    if len(train) == 0 or len(evalset) == 0:
        raise InputError("pruning needs non-empty train and eval splits")
    model = m_dense.clone()
    dense_count = len(model.slices)
    start = model.clone()
    stored, history = _prune_loop(model, train, evalset, budget, cfg, train_cfg, lora_magnitude, None, log_path)
    return _finish(stored, start, evalset, budget, dense_count, history, [])


def _finish(stored, fallback, evalset, budget, dense_count, history, setup) -> PruneResult:
    status = "ok"
    if stored is None:
        log.warning("accuracy never exceeded %.4f; returning the post-setup model", budget.acc_tol)
        stored, status = fallback, "below_tolerance"
    stored.role = "SPARSE"
    acc = accuracy(stored, evalset.x, evalset.y)
    return PruneResult(stored, status, acc, budget.acc_tol, dense_count, history, setup)


# ---------------------------------------------------------------- dynamic attention


@dataclass
class DynamicAttentionState:
    beta_init: dict[int, float]
    beta_final: dict[int, float]
    substituted: dict[int, str]  # layer id -> "linear" | "standard"
    acc_before: float
    acc_after: float
    threshold: float

    def as_dict(self) -> dict:
        return {k: (v if not isinstance(v, dict) else {str(i): x for i, x in v.items()}) for k, v in asdict(self).items()}


def betas(g: GraphSpec) -> dict[int, float]:
    return {layer.id: float(layer.extras["beta"].data[0]) for layer in g.layers if "beta" in layer.extras}


def beta_penalty(weight: float) -> Callable[[GraphSpec], Tensor] | None:
    if weight == 0:
        return None

    def penalty(g: GraphSpec) -> Tensor:
        bs = [layer.extras["beta"] for layer in g.layers if "beta" in layer.extras]
        return ad.scale(ad.tsum(ad.concat(bs, axis=0)), weight)

    return penalty


def substitute_attention(g: GraphSpec, threshold: float = 0.5) -> dict[int, str]:
    """Collapse every dynamic block to exactly one attention kind."""
    out = {}
    for layer in g.layers:
        if layer.kind != "attention" or layer.dims.get("mode") != "dynamic":
            continue
        beta = float(layer.extras["beta"].data[0])
        mode = "linear" if beta < threshold else "standard"
        layer.dims["mode"] = mode
        if mode == "standard":
            layer.extras = {}
        else:
            layer.extras.pop("beta")
        out[layer.id] = mode
    return out


def train_dynamic_attention(
    g_vit: GraphSpec,
    train: Dataset,
    evalset: Dataset,
    cfg: TrainConfig,
    reg_weight: float = 1.0,
    threshold: float = 0.5,
    beta_init: float = 1.0,
    train_beta: bool = True,
    seed: int = 0,
) -> tuple[GraphSpec, DynamicAttentionState]:
    """Train interpolated attention (CE + reg_weight * sum beta), then substitute.

    Blocks whose beta ends below ``threshold`` become pure linear attention, the
    rest pure standard attention.  ``g_vit`` is not modified.
    """
    _check_frozen_backbone(g_vit)
    g = g_vit.clone()
    enable_linear_attention(g, "dynamic", seed=seed, beta_init=beta_init)
    for layer in g.layers:
        if "beta" in layer.extras:
            layer.extras["beta"].requires_grad = train_beta
    start = betas(g)
    fit(g, train, cfg, penalty=beta_penalty(reg_weight), stream="dynamic-attention")
    final = betas(g)
    before = accuracy(g, evalset.x, evalset.y)
    subs = substitute_attention(g, threshold)
    after = accuracy(g, evalset.x, evalset.y)
    return g, DynamicAttentionState(start, final, subs, before, after, threshold)
