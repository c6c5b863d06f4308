"""Command-line entry point (``fleetlearn``).

Experiment commands: ``pretrain``, ``run``, ``eval``, ``report``.
Process commands for multi-process deployments: ``broker``, ``actor``,
``learner``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import zlib
from fractions import Fraction

import numpy as np

from . import envsim
from .actor import LATEST_CKPT_KEY, ActorConfig, run_actor
from .bus import Broker, BrokerServer, RemoteBroker, parse_address
from .config import load_config
from .harness import (CsvSink, build_algorithm, demo_corpus, eval_mode, evaluate_policy,
                      parse_fraction, pretrain, run_sop, select_fraction, summarize, write_summary)
from .learner import Learner
from .policy import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .store import EpisodeStore

log = logging.getLogger("fleetlearn")


def _fraction_tag(fraction: float) -> str:
    f = Fraction(fraction).limit_denominator(64)
    return f"{f.numerator}-{f.denominator}"


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    fraction = parse_fraction(args.fraction)
    params = pretrain(cfg, fraction, args.seed)
    out = args.out or os.path.join("runs", f"base_f{_fraction_tag(fraction)}_s{args.seed}.ckpt")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_checkpoint(params, out)
    print(json.dumps({"checkpoint": out, "version": params.version,
                      "hash": f"{params.content_hash:016x}"}))
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    corpus = demo_corpus(cfg)
    if args.base:
        base = load_checkpoint(args.base)
    else:
        base = pretrain(cfg, cfg.pretrain_fraction, args.seed, corpus)
    out = args.out or os.path.join("runs", f"run_{args.algo}_n{args.actors}_s{args.seed}")
    metrics, params, learner = run_sop(cfg, args.actors, args.algo, args.budget_steps, args.seed,
                                       base, corpus=corpus, out_dir=out)
    print(json.dumps({"out": out, "final_success": metrics.final_success,
                      "time_to_target": metrics.time_to_target,
                      "throughput": metrics.throughput, "publishes": learner.publishes,
                      "episodes": len(learner.index)}))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    params = load_checkpoint(args.ckpt)
    mode, beta = eval_mode(cfg, args.algo)
    res = evaluate_policy(params, cfg, args.trials, seed=args.seed, mode=mode, beta=beta)
    print(json.dumps({"success_rate": res.success_rate, "throughput": res.throughput,
                      "trials": res.trials}))
    return 0


def cmd_report(args) -> int:
    rows = summarize(args.files, baseline=args.baseline, target=args.target)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_summary(rows, fh)
    else:
        write_summary(rows, sys.stdout)
    return 0


def cmd_broker(args) -> int:
    server = BrokerServer((args.host, args.port),
                          Broker(redelivery_timeout=args.redelivery_timeout)).start()
    print(server.address, flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    server.stop()
    return 0


def _initial_params(store: EpisodeStore, ckpt: str | None):
    if ckpt:
        return load_checkpoint(ckpt)
    return decode_checkpoint(store.get_bytes(LATEST_CKPT_KEY))


def cmd_actor(args) -> int:
    cfg = load_config(args.config)
    parse_address(args.broker)
    store = EpisodeStore(args.store)
    bus = RemoteBroker(args.broker)
    params = _initial_params(store, args.ckpt)
    domain_seed = args.domain_seed if args.domain_seed is not None else args.seed
    ac = ActorConfig(args.actor_id, args.task_id, domain_seed, horizon=cfg.horizon,
                     gate_window=cfg.gate_window,
                     rollout_mode="recap" if cfg.algorithm == "recap" else "sample",
                     beta=cfg.beta_rollout)
    domain = envsim.sample_domain(args.task_id, domain_seed, num_tasks=cfg.num_tasks)
    rng = np.random.default_rng([args.seed, zlib.crc32(args.actor_id.encode())])
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    actor = run_actor(ac, bus, store, params, domain=domain, rng=rng, episodes=args.episodes,
                      stop=stop)
    print(json.dumps({"actor_id": args.actor_id, "episodes": actor.episodes_started,
                      "dropped": actor.dropped, "version": actor.params.version}))
    return 0


def cmd_learner(args) -> int:
    cfg = load_config(args.config).replace(seed=args.seed)
    store = EpisodeStore(args.store)
    bus = RemoteBroker(args.broker)
    corpus = demo_corpus(cfg)
    offline = select_fraction(corpus, cfg.pretrain_fraction, cfg.num_tasks)
    base = load_checkpoint(args.ckpt) if args.ckpt else pretrain(cfg, cfg.pretrain_fraction,
                                                                 args.seed, corpus)
    algo = build_algorithm(cfg, cfg.algorithm, base, offline)
    store.put_bytes(LATEST_CKPT_KEY, encode_checkpoint(base))
    sink = CsvSink(args.metrics) if args.metrics else None
    learner = Learner(cfg.train_config(args.budget_steps), base, bus, store, algo, offline,
                      on_metrics=sink)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        params = learner.train(stop=stop)
    finally:
        if sink is not None:
            sink.close()
    if args.out:
        save_checkpoint(params, args.out)
    print(json.dumps({"steps": learner.steps, "publishes": learner.publishes,
                      "episodes": len(learner.index), "duplicates": learner.duplicates}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fleetlearn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="behavior-clone a base policy on a demo fraction")
    s.add_argument("--fraction", required=True, help="e.g. 1/8, 0.5, 1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--out", help="checkpoint path")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("run", help="simulated-clock fleet run")
    s.add_argument("--actors", type=int, required=True)
    s.add_argument("--algo", choices=("hgdagger", "recap"), default="hgdagger")
    s.add_argument("--budget-steps", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--base", help="base checkpoint (default: pretrain pretrain_fraction)")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="held-out evaluation without interventions")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--algo", choices=("hgdagger", "recap"), default="hgdagger")
    s.add_argument("--config")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="summarize run metrics files as CSV")
    s.add_argument("files", nargs="+")
    s.add_argument("--baseline", type=int, default=0, help="index of the baseline file")
    s.add_argument("--target", type=float, default=0.8)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("broker", help="serve a TCP broker")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=7450)
    s.add_argument("--redelivery-timeout", type=float, default=2.0)
    s.set_defaults(func=cmd_broker)

    s = sub.add_parser("actor", help="run one actor process")
    s.add_argument("--actor-id", required=True)
    s.add_argument("--task-id", type=int, required=True)
    s.add_argument("--broker", required=True, help="host:port")
    s.add_argument("--store", required=True, help="episode store root")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--domain-seed", type=int)
    s.add_argument("--episodes", type=int)
    s.add_argument("--ckpt", help="initial checkpoint (default: the store's latest)")
    s.add_argument("--config")
    s.set_defaults(func=cmd_actor)

    s = sub.add_parser("learner", help="run the learner against a TCP broker")
    s.add_argument("--broker", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--budget-steps", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ckpt")
    s.add_argument("--config")
    s.add_argument("--metrics", help="learner metrics CSV path")
    s.add_argument("--out", help="final checkpoint path")
    s.set_defaults(func=cmd_learner)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"fleetlearn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
