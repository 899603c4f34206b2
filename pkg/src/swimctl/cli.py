"""Command line: ``swimctl run|verify|mesh <config>``.

Exit status is 0 on success, 1 when a check fails or a stage raises, and 2
on a configuration or file error.  With ``--server URL`` the command is sent
to a running ``swimctl serve`` instance instead of executing in-process.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import load_config, reference_text
from .errors import ConfigError, MeshFileError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _parser():
    p = argparse.ArgumentParser(prog="swimctl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("run", "run the configured scenario and write its artifacts"),
        ("verify", "run the acceptance checks and write verify.json"),
        ("mesh", "write the mesh text file and a mesh summary"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", help="config file (INI sections; see `swimctl reference`)")
        s.add_argument("--server", help="base URL of a running service; run remotely")
        if name == "verify":
            s.add_argument("--only", help="comma-separated criterion numbers")
    sub.add_parser("reference", help="print a commented config with every key and default")
    s = sub.add_parser("serve", help="start the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    return p


def _print(summary: dict, status: int):
    print(json.dumps(summary, sort_keys=True, indent=2))
    if status == EXIT_CHECK:
        print("check failed", file=sys.stderr)


def _remote(args) -> int:
    import httpx

    path = Path(args.config)
    try:
        text = path.read_text()
    except OSError as exc:
        print(f"error: cannot read config {path}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    body = {"config_text": text, "base_dir": str(path.resolve().parent)}
    try:
        r = httpx.post(f"{args.server.rstrip('/')}/{args.command}", json=body, timeout=None)
    except httpx.HTTPError as exc:
        print(f"error: cannot reach {args.server}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    data = r.json()
    if r.status_code != 200:
        where = data.get("field") or data.get("path") or ""
        print(f"error: {data.get('message', r.text)}" + (f" [{where}]" if where else ""), file=sys.stderr)
        return EXIT_CONFIG
    _print(data["summary"], data["status"])
    return int(data["status"])


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "reference":
        print(reference_text())
        return EXIT_OK
    if args.command == "serve":
        import uvicorn

        uvicorn.run("swimctl.service:app", host=args.host, port=args.port)
        return EXIT_OK
    if args.server:
        return _remote(args)
    only = None
    if getattr(args, "only", None):
        try:
            only = {int(x) for x in args.only.split(",")}
        except ValueError:
            print(f"error: --only expects comma-separated integers, got {args.only!r}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    # BLAS reads these at import time, so set them before the numerics load
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(cfg.threads))
    from .runner import execute

    try:
        if only is not None:
            from .runner import verify_suite

            res = verify_suite(cfg, only=only)
        else:
            res = execute(args.command, cfg)
    except (ConfigError, MeshFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _print(res.summary, res.status)
    return res.status


if __name__ == "__main__":
    sys.exit(main())
