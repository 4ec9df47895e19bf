"""``ctr-agent``: node daemon and a thin HTTP client for it.

Exit codes: 0 success, 1 other failure, 2 policy denied, 3 escrow denied,
4 integrity failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import httpx

from ..errors import EXIT_FAILURE, EXIT_OK

DEFAULT_NODE = "http://127.0.0.1:7070"


def _size(text: str) -> int:
    from ..bench.harness import parse_size

    return parse_size(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctr-agent", description="Enclave-aware process migration agent")
    p.add_argument("--node", default=os.environ.get("CTR_NODE", DEFAULT_NODE), help="node daemon URL")
    p.add_argument("--timeout", type=float, default=300.0)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("serve", help="run the node daemon")
    s.add_argument("--listen", default="127.0.0.1:7070", help="HOST:PORT")
    s.add_argument("--state-dir", type=Path, default=None, help="manifests live here (default ~/.ctr/node)")
    s.add_argument("--platform-key", type=Path, default=None)
    s.add_argument("--mks", default=None, help="default key service HOST:PORT")

    s = sub.add_parser("spawn", help="start a simulated process with one enclave")
    s.add_argument("--program", default="counter")
    s.add_argument("--heap", type=_size, default=1 << 20, help="heap size, e.g. 64MiB")
    s.add_argument("--max-threads", type=int, default=4)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--fn", type=int, default=1, help="ecall function id the threads run")
    s.add_argument("--args", type=int, nargs="*", default=[])
    s.add_argument("--steps", type=int, default=0)
    s.add_argument("--crypto", choices=("hw", "sw"), default="hw")
    s.add_argument("--limit", type=int, default=None, help="migration limit policy")
    s.add_argument("--clear", action="append", default=[], help="cache clear policy slice")
    s.add_argument("--fork-allowed", action="store_true")
    s.add_argument("--mks", default=None)

    sub.add_parser("ps", help="list processes on the node")

    s = sub.add_parser("show", help="show one process")
    s.add_argument("--pid", type=int, required=True)

    s = sub.add_parser("run", help="advance a process")
    s.add_argument("--pid", type=int, required=True)
    s.add_argument("--steps", type=int, required=True)

    s = sub.add_parser("checkpoint", help="checkpoint a process to an image file")
    s.add_argument("--pid", type=int, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--mks", default=None)
    s.add_argument("--fork-allowed", action="store_true", default=None)

    s = sub.add_parser("restore", help="restore a process from an image file")
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--mks", default=None)

    s = sub.add_parser("self-migrate", help="checkpoint then restore on this node")
    s.add_argument("--pid", type=int, required=True)
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--mks", default=None)
    return p


def serve(args) -> int:
    import uvicorn

    from ..config import ctr_home, platform_key_path
    from ..mks import Platform, parse_address
    from ..service import Node, create_app

    logging.basicConfig(level=logging.INFO, format="%(asctime)s node %(message)s")
    platform = Platform.load_or_create(platform_key_path(args.platform_key))
    node = Node(args.state_dir or ctr_home() / "node", platform, args.mks)
    host, port = parse_address(args.listen)
    try:
        uvicorn.run(create_app(node), host=host, port=port, log_level="warning")
    except SystemExit as exc:
        # uvicorn exits 3 when it cannot start, which would read as escrow denied
        if exc.code not in (None, 0):
            return EXIT_FAILURE
    return EXIT_OK


def _request(args) -> tuple[str, str, dict | None]:
    path = lambda p: str(Path(p).resolve())  # noqa: E731  the daemon may run elsewhere
    if args.cmd == "spawn":
        body = {
            "program": args.program,
            "heap_size": args.heap,
            "max_threads": args.max_threads,
            "threads": args.threads,
            "fn_id": args.fn,
            "args": args.args,
            "steps": args.steps,
            "provider": args.crypto,
            "migration_limit": args.limit,
            "cache_clear": args.clear,
            "fork_allowed": args.fork_allowed,
            "mks": args.mks,
        }
        return "POST", "/processes", body
    if args.cmd == "ps":
        return "GET", "/processes", None
    if args.cmd == "show":
        return "GET", f"/processes/{args.pid}", None
    if args.cmd == "run":
        return "POST", f"/processes/{args.pid}/run", {"steps": args.steps}
    if args.cmd == "checkpoint":
        body = {"out": path(args.out), "mks": args.mks, "fork_allowed": args.fork_allowed}
        return "POST", f"/processes/{args.pid}/checkpoint", body
    if args.cmd == "restore":
        return "POST", "/restore", {"image": path(args.image), "mks": args.mks}
    if args.cmd == "self-migrate":
        return "POST", f"/processes/{args.pid}/self-migrate", {"image": path(args.image), "mks": args.mks}
    raise ValueError(args.cmd)


def call(args, client: httpx.Client | None = None) -> int:
    method, url, body = _request(args)
    own = client is None
    client = client or httpx.Client(base_url=args.node, timeout=args.timeout)
    try:
        resp = client.request(method, url, json=body)
    except httpx.HTTPError as exc:
        print(f"ctr-agent: cannot reach node {args.node}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        if own:
            client.close()
    try:
        data = resp.json()
    except ValueError:
        data = {"code": "HTTPError", "message": resp.text, "exit_code": EXIT_FAILURE}
    if resp.is_success:
        print(json.dumps(data, indent=2))
        return EXIT_OK
    print(f"ctr-agent: {data.get('code')}: {data.get('message')}", file=sys.stderr)
    return int(data.get("exit_code", EXIT_FAILURE))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd == "serve":
        return serve(args)
    return call(args)


if __name__ == "__main__":
    sys.exit(main())
