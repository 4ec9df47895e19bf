"""``mks serve --listen HOST:PORT --store PATH [--max-age SECS]``"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from ..config import platform_key_path
from .attestation import Platform
from .service import MigrationKeyService, MksServer, parse_address
from .store import EscrowStore


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mks", description="Migration key service")
    sub = p.add_subparsers(dest="cmd", required=True)
    s = sub.add_parser("serve", help="run the escrow server")
    s.add_argument("--listen", required=True, help="HOST:PORT (port 0 picks a free port)")
    s.add_argument("--store", required=True, type=Path, help="escrow log path")
    s.add_argument("--max-age", type=float, default=None, help="seconds before a deposit expires")
    s.add_argument(
        "--platform-key",
        type=Path,
        default=None,
        help="simulated attestation key (default: $CTR_PLATFORM_KEY or ~/.ctr/platform.key)",
    )
    s.add_argument("--sweep-interval", type=float, default=60.0)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s mks %(message)s")
    platform = Platform.load_or_create(platform_key_path(args.platform_key))
    service = MigrationKeyService(EscrowStore(args.store), platform, max_age=args.max_age)
    server = MksServer(parse_address(args.listen), service)
    stop = threading.Event()

    def sweep():
        while not stop.wait(args.sweep_interval):
            if args.max_age is not None:
                n = service.expire_stale()
                if n:
                    logging.info("expired %d stale deposits", n)

    threading.Thread(target=sweep, daemon=True).start()
    signal.signal(signal.SIGTERM, lambda *_: threading.Thread(target=server.shutdown).start())
    print(f"listening on {server.address}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        server.server_close()
        service.store.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
