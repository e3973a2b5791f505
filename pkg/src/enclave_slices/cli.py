"""Command-line entry point: ``tslc <subcommand>``.

Every subcommand reads a RunConfig (``--config``), applies flag overrides,
writes its outputs under the work directory together with the resolved
config, and exits with a code that identifies the error class.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (
    PartitionConfig,
    evaluate_attack,
    init_surrogate,
    label_oracle,
    make_partition,
    read_reports,
    steal,
    sweep,
    write_reports,
)
from .checkpoint import load_checkpoint, public_export, save_checkpoint
from .config import RunConfig, load_config, set_path
from .data import SPLITS, load_dataset, make_digits, save_dataset
from .errors import ConfigError, SliceError
from .fieldmath import FieldSpec
from .flops import percent_flops, throughput
from .graph import accuracy, attach_slices, predict
from .offload import PadStore, offload_ops
from .protocol import TCPTransport, Worker, serve_tcp
from .secure import EnclaveSession, deploy, enclave_infer, reference_logits
from .trainer import (
    AccuracyBudget,
    PruneConfig,
    TrainConfig,
    fit,
    iterative_prune,
    magnitude_prune_lora,
    pretrain_public,
    train_dense,
    train_victim,
    with_fresh_head,
)

log = logging.getLogger("tslc")


# ---------------------------------------------------------------- helpers


def _train_cfg(stage, seed: int) -> TrainConfig:
    return TrainConfig(epochs=stage.epochs, lr=stage.lr, batch_size=stage.batch_size, seed=seed)


class Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.workdir)
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.dir / name

    def data(self, split: str):
        return load_dataset(self.dir / "data" / f"{split}.tsds")

    def save_model(self, g, name: str) -> Path:
        g.meta["run_config"] = self.cfg.to_dict()
        p = self.path(name)
        save_checkpoint(g, p)
        return p

    def load_model(self, name_or_path):
        # bare file names resolve inside the work directory
        p = Path(name_or_path)
        return load_checkpoint(p if p.exists() or p.parent != Path(".") else self.path(name_or_path))

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return p

    def record_config(self, command: str) -> None:
        self.write_json(f"run_config.{command}.json", self.cfg.to_dict())


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(run: Run, args) -> dict:
    ds = run.cfg.dataset
    if ds.name != "digits":
        raise ConfigError(f"unknown dataset {ds.name!r} (available: digits)")
    sizes = {s: getattr(ds, s) for s in SPLITS}
    splits = make_digits(run.cfg.seed, sizes=sizes, public_classes=ds.public_classes)
    for name, d in splits.items():
        (run.dir / "data").mkdir(exist_ok=True)
        save_dataset(d, run.dir / "data" / f"{name}.tsds")
    return {"splits": {k: len(v) for k, v in splits.items()}}


def cmd_train_victim(run: Run, args) -> dict:
    cfg = run.cfg
    pub_data = run.data("public")
    train, evalset = run.data("train"), run.data("eval")
    public = pretrain_public(cfg.arch, pub_data, _train_cfg(cfg.public, cfg.seed), seed=cfg.seed)
    run.save_model(public, "public.tsmd")
    victim = train_victim(public, train, _train_cfg(cfg.victim, cfg.seed), seed=cfg.seed)
    acc = accuracy(victim, evalset.x, evalset.y)
    victim.meta["acc_vic"] = acc
    run.save_model(victim, "victim.tsmd")
    return {"acc_public": accuracy(public, pub_data.x, pub_data.y), "acc_vic": acc}


def cmd_slice(run: Run, args) -> dict:
    cfg = run.cfg
    public = run.load_model(args.public or "public.tsmd")
    train, evalset = run.data("train"), run.data("eval")
    policy = args.policy or ("LORA_ALL" if cfg.arch == "vit-t" else "DENSE_CNN")
    g = attach_slices(with_fresh_head(public, train.n_classes, cfg.seed), policy, seed=cfg.seed)
    tc = _train_cfg(cfg.dense, cfg.seed)
    if policy == "LORA_ALL":
        fit(g, train, tc, stream="lora")
    else:
        train_dense(g, train, tc, cfg.prune.lambda_complexity)
    acc = accuracy(g, evalset.x, evalset.y)
    g.meta["acc_dense"] = acc
    run.save_model(g, "dense.tsmd")
    return {"policy": policy, "slices": len(g.slices), "acc_dense": acc}


def cmd_prune(run: Run, args) -> dict:
    cfg = run.cfg
    dense = run.load_model(args.dense or "dense.tsmd")
    victim = run.load_model(args.victim or "victim.tsmd")
    train, evalset = run.data("train"), run.data("eval")
    acc_vic = accuracy(victim, evalset.x, evalset.y)
    budget = AccuracyBudget(acc_vic, cfg.prune.delta)
    pc = PruneConfig(**asdict(cfg.prune))
    tc = _train_cfg(cfg.dense, cfg.seed)
    log_path = run.path("prune_log.csv")
    lora = any(s.kind == "lora" for s in dense.slices)
    fn = magnitude_prune_lora if lora else iterative_prune
    res = fn(dense, train, evalset, budget, pc, tc, log_path=log_path)
    run.save_model(res.model, "sparse.tsmd")
    run.save_model(public_export(res.model), "sparse.worker.tsmd")
    summary = res.summary()
    summary["acc_vic"] = acc_vic
    run.write_json("prune_summary.json", summary)
    return {k: summary[k] for k in ("status", "acc", "acc_tol", "dense_slices", "final_slices")}


def cmd_pads(run: Run, args) -> dict:
    g = run.load_model(args.checkpoint or "sparse.tsmd")
    ops = offload_ops(g)
    store = PadStore(FieldSpec(run.cfg.field_p))
    store.fill(ops, args.count or run.cfg.pads_per_op, np.random.default_rng())
    out = Path(args.out) if args.out else run.path("pads.tspd")
    out.write_bytes(store.encode())
    return {"ops": len(ops), "pads_per_op": args.count or run.cfg.pads_per_op, "file": str(out)}


def cmd_deploy_worker(run: Run, args) -> dict:
    g = run.load_model(args.checkpoint or "sparse.worker.tsmd")
    ops = offload_ops(public_export(g), with_shapes=False)
    worker = Worker(ops, run.cfg.field_p, args.fault_rate, run.cfg.seed)
    log.info("worker serving %d ops on %s", len(ops), args.listen)
    serve_tcp(worker, args.listen, max_sessions=args.max_sessions)
    return {"served": worker.served}


def cmd_deploy_enclave(run: Run, args) -> dict:
    cfg = run.cfg
    g = run.load_model(args.checkpoint or "sparse.tsmd")
    calib = run.data("train").x
    data = run.data(args.split)
    x, y = data.x[: args.limit] if args.limit else data.x, data.y[: args.limit] if args.limit else data.y
    field_spec = FieldSpec(cfg.field_p)
    dep = deploy(g, calib, field_spec)
    if args.pads:
        pads = PadStore.decode(Path(args.pads).read_bytes(), dep.ops)
    else:
        pads = PadStore(field_spec)
        pads.fill(dep.ops, len(x), np.random.default_rng())
    verify = cfg.verify_rate if args.verify_rate is None else args.verify_rate
    transport = TCPTransport.connect(args.connect) if dep.ops else None
    session = EnclaveSession(dep, pads, transport, verify, seed=cfg.seed, push_weights=args.push)
    t0 = time.perf_counter()
    try:
        with session:
            logits = enclave_infer(session, x, return_logits=True)
    finally:
        if transport is not None:
            transport.close()
    elapsed = time.perf_counter() - t0
    labels = logits.argmax(axis=1)
    ref = reference_logits(dep, x)
    f32 = predict(g, x).argmax(axis=1)
    result = {
        "samples": int(len(x)),
        "accuracy": float((labels == y).mean()) if len(y) else 0.0,
        "bit_identical_to_reference": bool(np.array_equal(logits, ref)),
        "top1_agreement_f32": float((labels == f32).mean()) if len(y) else 0.0,
        "requests": session.stats.requests,
        "checks": session.stats.checks,
        "elapsed_s": elapsed,
        "worker_wait_s": session.stats.remote_s,
        "enclave_s": elapsed - session.stats.remote_s,
        "throughput_per_s": throughput([1000.0 * elapsed / len(x)]) if len(x) else 0.0,
    }
    run.write_json("deploy_result.json", result)
    if args.pads:
        Path(args.pads).write_bytes(pads.encode())
    return result


def cmd_infer(run: Run, args) -> dict:
    g = run.load_model(args.checkpoint or "sparse.tsmd")
    data = run.data(args.split)
    if args.quantized:
        logits = reference_logits(deploy(g, run.data("train").x, FieldSpec(run.cfg.field_p)), data.x)
    else:
        logits = predict(g, data.x)
    labels = logits.argmax(axis=1)
    out = Path(args.out) if args.out else run.path(f"predictions.{args.split}.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "truth"])
        w.writerows(zip(range(len(labels)), labels.tolist(), data.y.tolist()))
    return {"accuracy": float((labels == data.y).mean()), "file": str(out)}


def _attacker_public(run: Run, n_classes: int):
    return with_fresh_head(run.load_model("public.tsmd"), n_classes, run.cfg.seed + 7919)


def cmd_steal(run: Run, args) -> dict:
    cfg = run.cfg
    conf = PartitionConfig.parse(args.strategy)
    name = args.victim or ("sparse.tsmd" if conf.strategy == "TEESLICE" else "victim.tsmd")
    victim = run.load_model(name)
    queries, evalset = run.data("query"), run.data("attack_eval")
    budget = cfg.query_budget()
    q = queries.x[:budget]
    plan = make_partition(victim, conf)
    util = percent_flops(victim, plan).percent_tee
    truth = label_oracle(victim)
    if conf.strategy == "NO_SHIELD":
        rep = evaluate_attack(victim.clone(), truth(evalset.x), evalset, conf.label, 0, util, direct_copy=True)
    else:
        m_init = init_surrogate(_attacker_public(run, victim.n_classes), plan, victim)
        tc = TrainConfig(epochs=cfg.attack.epochs, lr=cfg.attack.lr, seed=cfg.seed)
        sur = steal(truth, m_init, q, tc, budget, stream=f"steal:{conf.label}")
        rep = evaluate_attack(sur, truth(evalset.x), evalset, conf.label, len(q), util)
    run.write_json(f"steal.{conf.label}.json", rep.as_dict())
    return rep.as_dict()


def cmd_sweep(run: Run, args) -> dict:
    cfg = run.cfg
    victim = run.load_model(args.victim or "victim.tsmd")
    hybrid = run.load_model(args.hybrid or "sparse.tsmd")
    queries, evalset = run.data("query"), run.data("attack_eval")
    configs = [PartitionConfig.parse(c) for c in (args.configs or cfg.attack.configs)]
    budget = cfg.query_budget()
    tc = TrainConfig(epochs=cfg.attack.epochs, lr=cfg.attack.lr, seed=cfg.seed)
    curve = sweep(victim, _attacker_public(run, victim.n_classes), configs, queries.x[:budget], evalset, tc,
                  cfg.attack.delta, hybrid=hybrid, budget=budget)
    write_reports(curve, run.path("reports.jsonl"), run.path("matrix.csv"))
    run.write_json("curve.json", curve.as_dict())
    return curve.as_dict()


def cmd_report(run: Run, args) -> dict:
    out: dict = {}
    reports_path = Path(args.reports) if args.reports else run.path("reports.jsonl")
    if reports_path.exists():
        reports = sorted(read_reports(reports_path), key=lambda r: (r.percent_tee, r.config))
        with open(run.path("frontier.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["percent_flops", "steal_accuracy", "fidelity", "config"])
            for r in reports:
                w.writerow([f"{r.percent_tee:.6f}", f"{r.accuracy:.6f}", f"{r.fidelity:.6f}", r.config])
        out["frontier"] = [[r.config, r.percent_tee, r.accuracy] for r in reports]
    ck = Path(args.checkpoint) if args.checkpoint else run.path("sparse.tsmd")
    if ck.exists():
        rep = percent_flops(load_checkpoint(ck))
        run.write_json("flops.json", rep.as_dict())
        with open(run.path("flops.csv"), "w", newline="") as fh:
            csv.writer(fh).writerows(rep.csv_rows())
        out["percent_tee"] = rep.percent_tee
    if not out:
        raise ConfigError("nothing to report: no reports.jsonl and no checkpoint found")
    return out


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the seeded dataset splits"),
    "train-victim": (cmd_train_victim, "pre-train the public model and fine-tune the victim"),
    "slice": (cmd_slice, "attach slices to the public backbone and train the dense model"),
    "prune": (cmd_prune, "iteratively prune slices down to the sparse hybrid model"),
    "pads": (cmd_pads, "precompute (or replenish) one-time pads for a deployment"),
    "deploy-worker": (cmd_deploy_worker, "serve public-layer products over TCP (untrusted role)"),
    "deploy-enclave": (cmd_deploy_enclave, "run split inference against a worker (enclave role)"),
    "infer": (cmd_infer, "local inference on a dataset split"),
    "steal": (cmd_steal, "run one model-stealing attack"),
    "sweep": (cmd_sweep, "security-vs-utility sweep over partition strategies"),
    "report": (cmd_report, "emit plot-ready FLOPs and frontier tables"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON RunConfig")
    common.add_argument("--workdir", help="directory for all artifacts")
    common.add_argument("--seed", type=int)
    common.add_argument("--arch", choices=["mlp-s", "cnn-s", "vit-t"])
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tslc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    ps = {name: sub.add_parser(name, parents=[common], help=text) for name, (_, text) in COMMANDS.items()}

    ps["slice"].add_argument("--public")
    ps["slice"].add_argument("--policy", choices=["DENSE_CNN", "LORA_ALL"])
    ps["prune"].add_argument("--dense")
    ps["prune"].add_argument("--victim")
    ps["pads"].add_argument("--checkpoint")
    ps["pads"].add_argument("--count", type=int)
    ps["pads"].add_argument("--out")
    ps["deploy-worker"].add_argument("--listen", default="127.0.0.1:7431")
    ps["deploy-worker"].add_argument("--checkpoint")
    ps["deploy-worker"].add_argument("--fault-rate", type=float, default=0.0, help="testing only")
    ps["deploy-worker"].add_argument("--max-sessions", type=int)
    ps["deploy-enclave"].add_argument("--connect", default="127.0.0.1:7431")
    ps["deploy-enclave"].add_argument("--checkpoint")
    ps["deploy-enclave"].add_argument("--pads")
    ps["deploy-enclave"].add_argument("--verify-rate", type=float)
    ps["deploy-enclave"].add_argument("--split", default="eval", choices=SPLITS)
    ps["deploy-enclave"].add_argument("--limit", type=int)
    ps["deploy-enclave"].add_argument("--push", action="store_true", help="push public weights instead of relying on the worker's checkpoint")
    ps["infer"].add_argument("--checkpoint")
    ps["infer"].add_argument("--split", default="eval", choices=SPLITS)
    ps["infer"].add_argument("--quantized", action="store_true")
    ps["infer"].add_argument("--out")
    ps["steal"].add_argument("--strategy", required=True, help='e.g. BLACK_BOX, "DEEP_K(2)", "MAGNITUDE_RATIO(0.01)"')
    ps["steal"].add_argument("--victim")
    ps["sweep"].add_argument("--victim")
    ps["sweep"].add_argument("--hybrid")
    ps["sweep"].add_argument("--configs", nargs="+")
    ps["report"].add_argument("--reports")
    ps["report"].add_argument("--checkpoint")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.workdir:
        cfg.workdir = args.workdir
    if args.seed is not None:
        cfg.seed = args.seed
    if args.arch:
        cfg.arch = args.arch
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        set_path(cfg, key.strip(), value.strip())
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        run = Run(cfg)
        run.record_config(args.command)
        result = COMMANDS[args.command][0](run, args)
    except SliceError as exc:
        print(f"tslc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
