"""Model-stealing benchmark: partition strategies, surrogate init, label-only stealing, sweeps."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .flops import percent_flops
from .graph import ENCLAVE, UNTRUSTED, GraphSpec, PartitionPlan, predict
from .trainer import TrainConfig, fit

STRATEGIES = ("NO_SHIELD", "BLACK_BOX", "DEEP_K", "SHALLOW_K", "MAGNITUDE_RATIO", "TEESLICE")


@dataclass(frozen=True)
class PartitionConfig:
    strategy: str
    k: int | None = None
    m: float | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.strategy in ("DEEP_K", "SHALLOW_K") and (self.k is None or self.k < 0):
            raise ConfigError(f"{self.strategy} needs k >= 0")
        if self.strategy == "MAGNITUDE_RATIO" and (self.m is None or not 0.0 <= self.m <= 1.0):
            raise ConfigError("MAGNITUDE_RATIO needs m in [0, 1]")

    @property
    def label(self) -> str:
        if self.strategy in ("DEEP_K", "SHALLOW_K"):
            return f"{self.strategy}({self.k})"
        if self.strategy == "MAGNITUDE_RATIO":
            return f"{self.strategy}({self.m:g})"
        return self.strategy

    @classmethod
    def parse(cls, text: str) -> "PartitionConfig":
        m = re.fullmatch(r"\s*([A-Z_]+)\s*(?:\(\s*([0-9.eE+-]+)\s*\))?\s*", text)
        if not m:
            raise ConfigError(f"cannot parse partition config {text!r}")
        name, arg = m.group(1), m.group(2)
        try:
            if name in ("DEEP_K", "SHALLOW_K"):
                return cls(name, k=int(arg) if arg is not None else None)
            if name == "MAGNITUDE_RATIO":
                return cls(name, m=float(arg) if arg is not None else None)
        except ValueError as exc:
            raise ConfigError(f"bad argument in {text!r}") from exc
        return cls(name)


def _all(g: GraphSpec, placement: str) -> dict[int, str]:
    return {layer.id: placement for layer in g.layers}


def make_partition(victim: GraphSpec, config: PartitionConfig) -> PartitionPlan:
    """Placement (and per-weight hiding) for one strategy.  ``k`` counts weighted units."""
    units = victim.units()
    s = config.strategy
    params = {"k": config.k, "m": config.m}
    if s == "NO_SHIELD" or (s == "MAGNITUDE_RATIO" and config.m == 0):
        return PartitionPlan(config.label, _all(victim, UNTRUSTED), UNTRUSTED, params)
    if s == "BLACK_BOX" or (s == "MAGNITUDE_RATIO" and config.m == 1):
        return PartitionPlan(config.label, _all(victim, ENCLAVE), ENCLAVE, params)
    if s in ("DEEP_K", "SHALLOW_K"):
        if config.k > len(units):
            raise ConfigError(f"k={config.k} exceeds the {len(units)} weighted layers of {victim.arch}")
        chosen = units[len(units) - config.k :] if s == "DEEP_K" else units[: config.k]
        placement = _all(victim, UNTRUSTED)
        for group in chosen:
            for layer in group:
                placement[layer.id] = ENCLAVE
        return PartitionPlan(config.label, placement, ENCLAVE, params)
    if s == "MAGNITUDE_RATIO":
        placement = {l.id: ENCLAVE if l.kind in ("relu", "batchnorm") else UNTRUSTED for l in victim.layers}
        hidden = {}
        for layer in victim.layers:
            for name, t in layer.weights.items():
                if name in ("mean", "var"):
                    continue
                hidden[f"layer{layer.id}.{name}"] = top_magnitude_mask(t.data, config.m)
        return PartitionPlan(config.label, placement, ENCLAVE, params, hidden)
    # TEESLICE: public backbone offloaded; slices, non-linears and the head stay inside
    placement = {
        l.id: ENCLAVE if (l.kind in ("relu", "batchnorm", "classifier")) else UNTRUSTED for l in victim.layers
    }
    return PartitionPlan(config.label, placement, ENCLAVE, params)


def top_magnitude_mask(w: np.ndarray, m: float) -> np.ndarray:
    """Boolean mask of the ceil(m * size) largest-|w| entries (ties: lowest flat index first)."""
    count = math.ceil(m * w.size)
    order = np.argsort(-np.abs(w).ravel(), kind="stable")
    mask = np.zeros(w.size, dtype=bool)
    mask[order[:count]] = True
    return mask.reshape(w.shape)


def _check_compatible(public: GraphSpec, victim: GraphSpec) -> None:
    if public.arch != victim.arch or public.n_classes != victim.n_classes:
        raise ConfigError(f"public model ({public.arch}, {public.n_classes} classes) does not match victim "
                          f"({victim.arch}, {victim.n_classes} classes)")
    if len(public.layers) != len(victim.layers):
        raise ConfigError("public and victim layer lists differ")
    for a, b in zip(public.layers, victim.layers):
        if a.kind != b.kind or a.id != b.id:
            raise ConfigError(f"layer {a.id}: {a.kind} vs {b.kind}")
        for name, t in a.weights.items():
            if name not in b.weights or b.weights[name].shape != t.shape:
                raise ConfigError(f"layer {a.id}.{name}: shape mismatch")


def init_surrogate(public: GraphSpec, plan: PartitionPlan, victim: GraphSpec) -> GraphSpec:
    """Public model with every weight the plan exposes overwritten by the victim's value."""
    _check_compatible(public, victim)
    sur = public.clone()
    sur.slices = []
    for layer, vlayer in zip(sur.layers, victim.layers):
        if plan.placement.get(layer.id, vlayer.placement) == ENCLAVE:
            continue
        for name, t in layer.weights.items():
            key = f"layer{layer.id}.{name}"
            src = vlayer.weights[name].data
            if key in plan.hidden:
                t.data = np.where(plan.hidden[key], t.data, src).astype(t.data.dtype)
            else:
                t.data = src.copy()
        if vlayer.extras:
            layer.extras = {n: type(t)(t.data.copy()) for n, t in vlayer.extras.items()}
            layer.dims = dict(vlayer.dims)
    if plan.slice_placement == UNTRUSTED:
        sur.slices = [s for s in victim.clone().slices]
    sur.role = "SURROGATE"
    sur.meta = {}
    sur.set_frozen(False, include_head=True)
    for s in sur.slices:
        for t in s.weights.values():
            t.requires_grad = True
    return sur


def label_oracle(victim: GraphSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Label-only query interface to a local victim."""
    return lambda x: predict(victim, x).argmax(axis=1)


def steal(
    oracle: Callable[[np.ndarray], np.ndarray],
    m_init: GraphSpec,
    queries: np.ndarray,
    cfg: TrainConfig,
    budget: int | None = None,
    stream: str = "steal",
) -> GraphSpec:
    """Fine-tune a copy of ``m_init`` on (query, victim label) pairs."""
    if budget is not None and len(queries) > budget:
        raise ConfigError(f"{len(queries)} queries exceed the budget of {budget}")
    sur = m_init.clone()
    if cfg.epochs == 0 or len(queries) == 0:
        return sur
    labels = np.asarray(oracle(queries), dtype=np.int64)
    fit(sur, Dataset(np.asarray(queries, np.float32), labels, sur.n_classes), cfg, stream=stream)
    return sur


@dataclass
class StealReport:
    config: str
    accuracy: float
    fidelity: float
    query_count: int
    percent_tee: float
    direct_copy: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_attack(
    m_sur: GraphSpec,
    victim_labels: np.ndarray,
    evalset: Dataset,
    config: str = "",
    query_count: int = 0,
    percent_tee: float = float("nan"),
    direct_copy: bool = False,
) -> StealReport:
    """Accuracy against ground truth; fidelity against the victim's labels on the same inputs."""
    pred = predict(m_sur, evalset.x).argmax(axis=1)
    acc = float((pred == evalset.y).mean()) if len(evalset) else 0.0
    fid = float((pred == np.asarray(victim_labels)).mean()) if len(evalset) else 0.0
    return StealReport(config, acc, fid, query_count, percent_tee, direct_copy)


@dataclass
class SweepPoint:
    config: str
    security: float
    utility: float
    report: StealReport


@dataclass
class SweepCurve:
    points: list[SweepPoint]
    security_black: float
    delta: float
    sweet_spot: str | None = None
    status: str = "ok"
    meta: dict = field(default_factory=dict)

    def point(self, label: str) -> SweepPoint:
        return next(p for p in self.points if p.config == label)

    def as_dict(self) -> dict:
        return {
            "security_black": self.security_black,
            "delta": self.delta,
            "sweet_spot": self.sweet_spot,
            "status": self.status,
            "points": [{"config": p.config, "security": p.security, "utility": p.utility} for p in self.points],
        }


def sweet_spot(points: list[SweepPoint], security_black: float, delta: float) -> str | None:
    """Lowest-utility configuration whose security is within ``delta`` of black-box."""
    ok = [p for p in points if abs(p.security - security_black) < delta]
    return min(ok, key=lambda p: p.utility).config if ok else None


def sweep(
    victim: GraphSpec,
    public: GraphSpec,
    configs: list[PartitionConfig],
    queries: np.ndarray,
    evalset: Dataset,
    cfg: TrainConfig,
    delta: float = 0.03,
    hybrid: GraphSpec | None = None,
    budget: int | None = None,
) -> SweepCurve:
    """Run partition -> init -> steal -> evaluate for every config.

    ``hybrid`` (the sliced model) is the deployed victim for TEESLICE; the other
    strategies partition ``victim``.  Each point trains with its own RNG stream.
    """
    if "BLACK_BOX" not in [c.strategy for c in configs]:
        raise ConfigError("a sweep needs the BLACK_BOX endpoint as its security reference")
    points = []
    for c in configs:
        target = hybrid if (c.strategy == "TEESLICE" and hybrid is not None) else victim
        plan = make_partition(target, c)
        util = percent_flops(target, plan).percent_tee
        truth = label_oracle(target)
        eval_labels = truth(evalset.x)
        if c.strategy == "NO_SHIELD" or (c.strategy == "MAGNITUDE_RATIO" and c.m == 0):
            sur = target.clone()
            rep = evaluate_attack(sur, eval_labels, evalset, c.label, 0, util, direct_copy=True)
        else:
            m_init = init_surrogate(public, plan, target)
            sur = steal(truth, m_init, queries, TrainConfig(**{**asdict(cfg)}), budget, stream=f"steal:{c.label}")
            rep = evaluate_attack(sur, eval_labels, evalset, c.label, len(queries), util)
        points.append(SweepPoint(c.label, rep.accuracy, util, rep))
    black = next(p for p in points if p.config == "BLACK_BOX").security
    spot = sweet_spot(points, black, delta)
    return SweepCurve(points, black, delta, spot, "ok" if spot else "no configuration within delta of black-box")


def write_reports(curve: SweepCurve, jsonl_path=None, csv_path=None) -> None:
    if jsonl_path is not None:
        Path(jsonl_path).parent.mkdir(parents=True, exist_ok=True)
        with open(jsonl_path, "w") as fh:
            for p in curve.points:
                fh.write(json.dumps(p.report.as_dict(), sort_keys=True) + "\n")
    if csv_path is not None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config", "accuracy", "fidelity", "percent_tee"])
            for p in curve.points:
                w.writerow([p.config, f"{p.report.accuracy:.6f}", f"{p.report.fidelity:.6f}", f"{p.report.percent_tee:.6f}"])


def read_reports(jsonl_path) -> list[StealReport]:
    with open(jsonl_path) as fh:
        return [StealReport(**json.loads(line)) for line in fh if line.strip()]
