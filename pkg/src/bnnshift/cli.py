"""Command-line runner: ``bnnshift run <config>``, ``bnnshift list``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
from threadpoolctl import threadpool_limits

from . import io
from .experiments import Outcome, run_protocol
from .models import DomainError
from .numkit import ConfigError, ShapeError

log = logging.getLogger("bnnshift")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
CONFIG_DIR = "configs"
SCHEMA_NAME = "config.schema.json"


class ConfigInvalid(Exception):
    """Config failed validation; the message starts with the offending field path."""


def _config_files() -> dict:
    root = resources.files("bnnshift") / CONFIG_DIR
    return {p.name[:-5]: p for p in root.iterdir() if p.name.endswith(".json") and p.name != SCHEMA_NAME}


def schema() -> dict:
    return json.loads((resources.files("bnnshift") / CONFIG_DIR / SCHEMA_NAME).read_text(encoding="utf-8"))


def bundled_config(name: str) -> dict:
    files = _config_files()
    if name not in files:
        raise ConfigInvalid(f"config: no bundled config named {name!r}")
    return json.loads(files[name].read_text(encoding="utf-8"))


def registry() -> list:
    """Bundled configs sorted by criterion: (criterion, name, description)."""
    rows = []
    for name in _config_files():
        cfg = bundled_config(name)
        rows.append((cfg["criterion"], name, cfg["description"]))
    return sorted(rows)


def _field_path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def validate(cfg: dict) -> dict:
    errors = sorted(jsonschema.Draft202012Validator(schema()).iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigInvalid(f"{_field_path(err)}: {err.message}")
    return cfg


def load_config(path_or_name: str) -> dict:
    p = Path(path_or_name)
    if p.is_file():
        try:
            cfg = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"<root>: not valid JSON ({exc})") from None
    else:
        cfg = bundled_config(path_or_name)
    validate(cfg)
    idx = cfg.get("data", {}).get("idx")
    if idx:
        for key, f in idx.items():
            if not Path(f).is_file():
                raise ConfigInvalid(f"data.idx.{key}: file {f!r} does not exist")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(io.canonical_json(cfg).encode("utf-8")).hexdigest()


def git_describe() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                           capture_output=True, text=True, timeout=10)
        return r.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_outputs(out_dir: Path, cfg: dict, outcome: Outcome, status: str, error: str = None) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    chains = {}
    if outcome.chains:
        (out_dir / "chains").mkdir(exist_ok=True)
    for name, chain in sorted(outcome.chains.items()):
        chain.save(out_dir / "chains" / name)
        chains[name] = {"files": [f"chains/{name}.bin", f"chains/{name}.json"], "samples": len(chain)}
    report = {
        "name": cfg["name"],
        "criterion": cfg["criterion"],
        "protocol": cfg["protocol"],
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "git_describe": git_describe(),
        "status": status,
        "partial": status != "complete",
        "error": error,
        "passed": outcome.passed if status == "complete" else False,
        "checks": [c.row() for c in outcome.checks],
        "diagnostics": outcome.diagnostics,
        "metrics": outcome.metrics,
        "projections": outcome.projections,
        "chains": chains,
    }
    io.write_json(out_dir / "report.json", report)
    io.write_csv(out_dir / "metrics.csv", outcome.metrics, None if outcome.metrics else ["predictor"])
    io.write_csv(out_dir / "projections.csv", outcome.projections, None if outcome.projections else ["source"])
    return report


def execute(cfg: dict, out_dir: Path, seed: int = None) -> dict:
    """Run one validated config and write every output under ``out_dir``."""
    cfg = dict(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    out_dir = Path(out_dir)
    start = time.perf_counter()
    try:
        outcome = run_protocol(cfg)
    except (ConfigError, ShapeError, DomainError) as exc:
        raise ConfigInvalid(str(exc)) from exc
    report = _write_outputs(out_dir, cfg, outcome, "complete")
    # timing stays out of report.json so reruns are byte-identical
    (out_dir / "run.log").write_text(f"wall_clock_seconds {time.perf_counter() - start:.3f}\n", encoding="utf-8")
    return report


def _cmd_list(args) -> int:
    for crit, name, desc in registry():
        print(f"{crit:>3}  {name:<26} {desc}")
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out) if args.out else Path("runs") / cfg["name"]
    try:
        with threadpool_limits(limits=args.threads):
            report = execute(cfg, out_dir, seed=args.seed)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime failure
        log.exception("run failed")
        cfg_seeded = dict(cfg, seed=args.seed if args.seed is not None else cfg["seed"])
        _write_outputs(out_dir, cfg_seeded, Outcome(), "failed", f"{type(exc).__name__}: {exc}")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    verdict = "PASS" if report["passed"] else "FAIL"
    print(f"{verdict} {cfg['name']} (criterion {cfg['criterion']}) -> {out_dir}")
    for c in report["checks"]:
        print(f"  {'ok ' if c['passed'] else 'BAD'} {c['name']} = {c['value']:.6g} ({c['bound']})")
    return EXIT_OK


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bnnshift", description="Run bundled or custom experiment configs.")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a config file or bundled config name")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (default runs/<name>)")
    run.add_argument("--seed", type=_u64, help="override the config seed")
    run.add_argument("--threads", type=int, default=1, help="BLAS threads")
    run.set_defaults(fn=_cmd_run)
    ls = sub.add_parser("list", help="list bundled configs")
    ls.set_defaults(fn=_cmd_list)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
