"""Shared CLI plumbing: config loading, world construction, DLB driver, error reporting."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..decomposition import Decomposition
from ..dlb import CostLedger, SARState, TraceWriter, rebalance, record_step, sar_decide
from ..errors import PartmeshError, UsageError
from ..transport import World, read_hostlist, tcp_world, world_spawn

EXIT_CODES = {
    "usage": 2,
    "transport": 3, "protocol": 3, "aborted": 3,
    "mapping": 4,
    "io": 5, "corrupt-file": 5, "incompatible-schema": 5,
    "physics": 6,
}


@dataclass
class RunOptions:
    out: str | None = None
    checkpoint_every: int = 0
    restart: str | None = None
    vtk_every: int = 0
    dlb: bool = False
    trace: str | None = None
    dlb_prior: float = 0.05         # seconds charged for the first rebalance
    migration_weight: float = 1.0   # cost units per migrated entity
    cost_model: str = "count"       # "count" or "time" (step time spread over entities)

    def path(self, name: str) -> str | None:
        if self.out is None:
            return None
        return os.path.join(self.out, name)


def config_from_dict(cls, data: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise UsageError(f"unknown {cls.__name__} fields: {unknown}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    cfg = cls(**kwargs)
    validate = getattr(cfg, "validate", None)
    if validate:
        validate()
    return cfg


def load_config(cls, path: str | None):
    if path is None:
        return config_from_dict(cls, {})
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    return config_from_dict(cls, data)


def write_sidecar(ckpt: str, step: int, extra: dict | None = None):
    with open(ckpt + ".json", "w") as fh:
        json.dump({"step": step, **(extra or {})}, fh)


def read_sidecar(ckpt: str) -> dict:
    try:
        with open(ckpt + ".json") as fh:
            return json.load(fh)
    except FileNotFoundError:
        return {"step": 0}


class Balancer:
    """Per-step timing, SAR decision and rebalancing, replicated on every rank."""

    def __init__(self, world: World, opts: RunOptions, ncells: int):
        self.world = world
        if opts.cost_model not in ("count", "time"):
            raise UsageError(f"unknown cost model {opts.cost_model!r}")
        self.enabled = opts.dlb
        self.weight = opts.migration_weight
        self.cost_model = opts.cost_model
        self.last_time = 0.0
        self.ledger = CostLedger.zeros(ncells)
        self.sar = SARState(C=opts.dlb_prior)
        self.trace = TraceWriter(opts.trace) if opts.trace and world.rank == 0 else None
        self.count = 0
        self._t0 = time.perf_counter()

    def start(self):
        self._t0 = time.perf_counter()

    def finish_step(self, step: int) -> bool:
        """Record this step's per-rank times; True if a rebalance should follow."""
        local = time.perf_counter() - self._t0
        self.last_time = local
        times = self.world.allgather_obj(local)
        delta = record_step(self.ledger, self.sar, times)
        fire = self.enabled and sar_decide(self.sar)
        if not self.enabled:
            self.sar.W = (self.sar.C + self.sar.sum_delta) / self.sar.n
        if self.trace is not None:
            self.trace.row(step, times, delta, self.sar.W, fire)
        return fire

    def rebalance(self, dec: Decomposition, cell_counts_local: np.ndarray, psets=(), grids=()):
        local = np.asarray(cell_counts_local, dtype=np.float64)
        counts = self.world.allreduce_sum(local)
        compute = counts
        if self.cost_model == "time":
            total = local.sum()
            share = local * (self.last_time / total) if total > 0 else local
            compute = self.world.allreduce_sum(share)
        self.ledger.set_costs(compute, counts * self.weight)
        new_dec, new_grids = rebalance(dec, self.ledger, self.sar, self.world, psets, grids)
        self.count += 1
        return new_dec, new_grids

    def close(self):
        if self.trace is not None:
            self.trace.close()


def cell_counts(dec: Decomposition, pos: np.ndarray) -> np.ndarray:
    cells = dec.grid.cell_of_points(dec.wrap(pos))
    return np.bincount(cells[cells >= 0], minlength=dec.grid.ncells).astype(np.float64)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser(prog: str, description: str) -> argparse.ArgumentParser:
    p = _Parser(prog=prog, description=description)
    p.add_argument("--config", help="JSON config file (fields mirror the config type)")
    p.add_argument("--ranks", type=int, default=1, help="number of in-process ranks")
    p.add_argument("--tcp", metavar="HOSTLIST", help="host:port per line; run one rank over TCP")
    p.add_argument("--rank", type=int, help="this process's rank when using --tcp")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--restart", help="checkpoint file to resume from")
    p.add_argument("--vtk-every", type=int, default=0)
    p.add_argument("--dlb", choices=("on", "off"), default="off")
    p.add_argument("--trace", help="CSV file for the load-balancing trace")
    return p


def report_error(exc: BaseException) -> int:
    if isinstance(exc, PartmeshError):
        cat = exc.category
    elif isinstance(exc, OSError):
        cat = "io"
    else:
        cat = "internal"
    sys.stderr.write(json.dumps({"error": cat, "message": str(exc)}) + "\n")
    return EXIT_CODES.get(cat, 1)


def main_runner(prog: str, description: str, config_cls, program: Callable,
                argv: Sequence[str] | None = None) -> int:
    """Parse the common flags and run ``program(world, cfg, opts)`` on every rank."""
    try:
        args = build_parser(prog, description).parse_args(argv)
        cfg = load_config(config_cls, args.config)
        if args.steps is not None:
            if args.steps < 0:
                raise UsageError("--steps must be >= 0")
            cfg = dataclasses.replace(cfg, steps=args.steps)
        for flag in ("checkpoint_every", "vtk_every"):
            if getattr(args, flag) < 0:
                raise UsageError(f"--{flag.replace('_', '-')} must be >= 0")
        opts = RunOptions(out=args.out, checkpoint_every=args.checkpoint_every,
                          restart=args.restart, vtk_every=args.vtk_every,
                          dlb=args.dlb == "on", trace=args.trace)
        if opts.out:
            os.makedirs(opts.out, exist_ok=True)
        if args.tcp:
            if args.rank is None:
                raise UsageError("--tcp needs --rank")
            hosts = read_hostlist(args.tcp)
            world = tcp_world(args.rank, hosts)
            try:
                summary = program(world, cfg, opts)
            finally:
                world.close()
            rank = args.rank
        else:
            if args.ranks < 1:
                raise UsageError("--ranks must be >= 1")
            summary = world_spawn(args.ranks, program, cfg, opts)[0]
            rank = 0
        if rank == 0:
            text = json.dumps(summary, default=_json_default)
            sys.stdout.write(text + "\n")
            if opts.out:
                with open(os.path.join(opts.out, "summary.json"), "w") as fh:
                    fh.write(text + "\n")
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        return report_error(exc)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
