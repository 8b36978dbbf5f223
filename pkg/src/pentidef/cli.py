"""Command line entry point: ``pentidef <subcommand>``.

Subcommands::

    simulate --config FILE [--seed N] [--out PATH] [--format json|csv] [--jobs N]
    bench-ledger --txs N --rate R --out PATH
    validate-config FILE
    oracle NAME [--seed N]

Config files are TOML (or JSON) with top-level keys ``n_clients``,
``rounds``, ``adversary_fraction``, ``defense``, ``seed``, ``hidden``,
``partition``, ``alpha``, ``cka_variant``, ``split_min_gap``,
``split_min_separation``, ``krum_f``, ``flare_probe``,
``flare_k``, ``n_jobs`` and the tables ``[data]``, ``[attack]``
(``[attack.gan]``), ``[ddp]``, ``[train]``, ``[autoencoder]``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import oracles
from .ledger import Workload, bench_run
from .simulation import ConfigError, emit_report, load_config, run_simulation

log = logging.getLogger("pentidef")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pentidef", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a federated simulation from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--jobs", type=int, help="client-phase worker threads")
    s.add_argument("--timing", action="store_true", help="include wall-clock in the report")

    b = sub.add_parser("bench-ledger", help="benchmark the ledger chaincode tasks")
    b.add_argument("--txs", type=int, default=5000)
    b.add_argument("--rate", type=float, default=5.0)
    b.add_argument("--out")

    v = sub.add_parser("validate-config", help="check a config file against the schema")
    v.add_argument("file")

    o = sub.add_parser("oracle", help="print a brute-force oracle fixture as JSON")
    o.add_argument("name", choices=oracles.FIXTURES)
    o.add_argument("--seed", type=int, default=0)
    return p


def _simulate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.jobs is not None:
        cfg = replace(cfg, n_jobs=args.jobs)
    cfg.validate()
    report = run_simulation(cfg, progress=lambda r: log.info(
        "round %d: accuracy %.4f f1 %.4f", r.round, r.metrics["accuracy"], r.metrics["f1"]))
    if args.out:
        emit_report(report, args.out, args.format, args.timing)
    else:
        from .simulation import report_bytes
        sys.stdout.write(report_bytes(report, args.format, args.timing).decode())
    return 0


def _bench(args) -> int:
    report, _ = bench_run(Workload(txs=args.txs, send_rate=args.rate))
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if not report.chain_valid:
        print("error: chain failed verification after the benchmark", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "simulate":
            return _simulate(args)
        if args.command == "bench-ledger":
            return _bench(args)
        if args.command == "validate-config":
            cfg = load_config(args.file)
            print(f"{args.file}: ok ({cfg.n_clients} clients, {cfg.rounds} rounds, "
                  f"defense {cfg.defense})")
            return 0
        if args.command == "oracle":
            print(json.dumps(oracles.fixture(args.name, args.seed), indent=2))
            return 0
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
