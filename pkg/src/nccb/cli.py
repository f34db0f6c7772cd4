"""Command-line entry point.

Usage::

    nccb list
    nccb run bench=1b seeds=5 scale=0.1 out=results [key=value ...] [--config file.yaml]

Free-form ``key=value`` arguments use dotted paths into the bench config
(``K``, ``agents``, ``env.*``, ``params.*``).  Values are parsed as YAML
scalars or flow sequences, so ``params.k_grid=[200,500]`` and
``agents=flat_ts,flat_cts`` both work.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from . import __version__
from .bench import list_benches, make_config, run_bench
from .env import ConfigError, ContractViolation
from .prism import CertificateFault, OverlapViolation

log = logging.getLogger("nccb")

RESERVED = ("bench", "seeds", "scale", "out", "seed")
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


@dataclass
class RunManifest:
    """Reproducibility record written next to the bench outputs."""

    config_hash: str
    root_seed: int
    version: str
    outputs: dict
    wall_clock_s: float
    effective_config: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def parse_value(text: str):
    """YAML scalar, or a comma-separated list when the text has commas."""
    if "," in text and not text.lstrip().startswith(("[", "{")):
        return [yaml.safe_load(t) for t in text.split(",")]
    return yaml.safe_load(text)


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    if any(not p for p in parts):
        raise ConfigError(f"malformed key {key!r}")
    node = d
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{key!r} descends into a non-mapping value")
        node = nxt
    node[parts[-1]] = value


def parse_overrides(items: Sequence[str]) -> dict:
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, text = item.split("=", 1)
        set_dotted(out, key.strip(), parse_value(text))
    return out


def _merge(base: dict, upd: Mapping) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return data


def resolve(raw: Mapping):
    """Split a merged mapping into a :class:`BenchConfig` and an out dir."""
    if "bench" not in raw:
        raise ConfigError("bench=<id> is required")
    seeds = raw.get("seeds")
    if isinstance(seeds, str):
        seeds = parse_value(seeds)
    overrides = {k: v for k, v in raw.items() if k not in RESERVED}
    if isinstance(overrides.get("agents"), str):
        overrides["agents"] = [overrides["agents"]]
    cfg = make_config(str(raw["bench"]), seeds=seeds, scale=float(raw.get("scale", 1.0)),
                      root_seed=int(raw.get("seed", 0)), overrides=overrides)
    return cfg, Path(str(raw.get("out", "results")))


def effective_config(cfg, out: Path) -> dict:
    """Mapping that reproduces ``cfg`` when passed back through ``--config``."""
    return {"bench": cfg.bench, "seeds": list(cfg.seeds), "scale": cfg.scale,
            "seed": cfg.root_seed, "out": str(out), "K": cfg.K, "agents": list(cfg.agents),
            "env": cfg.env, "params": cfg.params}


def cmd_run(args) -> int:
    raw = load_config(args.config) if args.config else {}
    raw = _merge(raw, parse_overrides(args.overrides))
    cfg, out = resolve(raw)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    t0 = time.perf_counter()
    result = run_bench(cfg, workers=args.workers)
    wall = time.perf_counter() - t0
    paths = result.write(out)
    eff = effective_config(cfg, out)
    cfg_path = out / f"bench_{cfg.bench}_config.yaml"
    cfg_path.write_text(yaml.safe_dump(eff, sort_keys=True))
    paths["config"] = str(cfg_path)
    manifest = RunManifest(cfg.config_hash(), cfg.root_seed, __version__, paths, wall, eff)
    manifest.write(out / f"bench_{cfg.bench}_manifest.json")
    sys.stdout.write(result.summary_text())
    log.info("wrote %s", ", ".join(sorted(paths.values())))
    return 0


def cmd_list(args) -> int:
    for bid, title, deviation in list_benches():
        print(f"{bid:<11} {title}  [deviation: {deviation}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nccb", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"nccb {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a bench")
    run.add_argument("overrides", nargs="*", help="key=value settings")
    run.add_argument("--config", help="YAML file with the same keys")
    run.add_argument("--workers", type=int, default=1, help="parallel seed workers")
    run.set_defaults(func=cmd_run)
    lst = sub.add_parser("list", help="list registered benches")
    lst.set_defaults(func=cmd_list)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractViolation, CertificateFault, OverlapViolation) as exc:
        print(f"invariant violated: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    raise SystemExit(main())
