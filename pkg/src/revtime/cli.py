"""``revtime <subcommand> --config <path> [--out <dir>] [--seed <n>]``

Exit status: 0 when every configured assertion passes, 1 on a solver failure
or a failed assertion, 2 on a config error (nothing is written then).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from pydantic import ValidationError

from .experiments import (PIPELINES, SCHEMA_VERSION, ExperimentConfig, StageError, _jsonable,
                          config_hash, run_pipeline)
from .forward import save_field
from .grid import Field

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _config_error(msg: str) -> int:
    print(f"config error: {msg}", file=sys.stderr)
    return EXIT_CONFIG


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def load_config(path: str, out: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Parse and validate; raises ``ValueError`` with a field diagnostic."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ValueError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be an object")
    if out is not None:
        raw["output"] = out
    if seed is not None:
        raw.setdefault("noise", {})
        if isinstance(raw["noise"], dict):
            raw["noise"]["seeds"] = [seed]
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ValueError(f"{path}: {_format_validation(exc)}") from None


def write_outputs(out_dir: str, command: str, cfg: ExperimentConfig, result, extra: bytes = b"") -> dict:
    """Write artifacts; ``extra`` holds input bytes beyond the config (hashed too)."""
    os.makedirs(out_dir, exist_ok=True)
    resolved = cfg.model_dump(mode="json")
    resolved["problem"].update(cfg.problem.resolved())
    hashed = {k: v for k, v in resolved.items() if k != "output"}
    for name, content in sorted(result.files.items()):
        target = os.path.join(out_dir, name)
        if isinstance(content, Field):
            save_field(target, content)
        else:
            with open(target, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(content)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "input_sha256": config_hash({"command": command, "config": hashed}, extra),
        "passed": result.passed,
        "assertions": result.assertions,
        "results": _jsonable(result.summary),
    }
    with open(os.path.join(out_dir, "config.resolved.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="revtime", description="Backward parabolic reconstruction experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in PIPELINES:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", default=None, help="output directory (overrides config)")
        sp.add_argument("--seed", type=int, default=None, help="replaces noise.seeds with [seed]")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.out, args.seed)
    except ValueError as exc:
        return _config_error(str(exc))
    try:
        result = run_pipeline(args.command, cfg)
    except StageError as exc:
        print(f"solver failure in stage {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"solver failure in stage io: {exc}", file=sys.stderr)
        return EXIT_FAIL
    extra = b""
    if args.command == "fit-rate":
        with open(cfg.fit.table, "rb") as fh:
            extra = fh.read()
    summary = write_outputs(cfg.output, args.command, cfg, result, extra)
    for name, a in sorted(summary["assertions"].items()):
        print(f"{'PASS' if a['passed'] else 'FAIL'} {name}: value={a['value']} limit={a['limit']}")
    print(f"{args.command}: {'ok' if result.passed else 'assertions failed'} -> {cfg.output}")
    return EXIT_OK if result.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
