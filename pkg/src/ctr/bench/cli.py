"""``ctr-bench throughput`` and ``ctr-bench sweep``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import MiB, PHASES, emit_report, parse_size, run_latency_sweep, run_throughput_bench


def _sizes(text: str) -> list[int]:
    return [parse_size(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctr-bench", description="Migration benchmarks")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("throughput", help="SmallBank throughput around a self-migration")
    t.add_argument("--size", type=parse_size, default=64 * MiB, help="enclave size, e.g. 64MiB")
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--runs", type=int, default=1, help="seeds seed, seed+1, ...")
    t.add_argument("--pre-secs", type=float, default=5.0)
    t.add_argument("--post-secs", type=float, default=5.0)
    t.add_argument("--crypto", choices=("hw", "sw"), default="hw")
    t.add_argument("--out", type=Path, default=Path("bench-out"))

    s = sub.add_parser("sweep", help="latency against enclave size")
    s.add_argument("--sizes", type=_sizes, default=_sizes("8,16,32,64,128,256,512,1024"), help="MiB list")
    s.add_argument(
        "--phase",
        action="append",
        choices=PHASES,
        default=None,
        help="repeatable; default full",
    )
    s.add_argument("--crypto", choices=("hw", "sw"), default="hw")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--seed", type=int, default=0, help="visiting order")
    s.add_argument("--out", type=Path, default=Path("bench-out"))
    return p


def throughput(args) -> int:
    records, ok = [], True
    for i in range(args.runs):
        seed = args.seed + i
        r = run_throughput_bench(args.size, seed, args.pre_secs, args.post_secs, provider=args.crypto)
        records += r.records
        good = r.sequence_ok and r.available and r.conserved and r.matches_reference
        ok = ok and good
        print(
            f"seed {seed}: {len(r.commits)} txns, per-second {r.per_second}, "
            f"pause {r.markers['restore-end'] - r.markers['checkpoint-start']:.3f}s, "
            f"sequence {'ok' if r.sequence_ok else 'BROKEN'}, "
            f"availability {'ok' if r.available else 'ZERO WINDOW'}, "
            f"state {'ok' if r.conserved and r.matches_reference else 'MISMATCH'}"
        )
    print(emit_report(records, args.out))
    return 0 if ok else 1


def sweep(args) -> int:
    sizes = sorted(args.sizes)

    def progress(rec):
        if rec.metric in ("checkpoint", "restore"):
            print(f"{rec.run_id} {rec.metric} {rec.value:.4f}s", file=sys.stderr)

    records = run_latency_sweep(
        sizes, args.phase or ["full"], args.crypto, args.runs, seed=args.seed, on_point=progress
    )
    print(emit_report(records, args.out))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return throughput(args) if args.cmd == "throughput" else sweep(args)


if __name__ == "__main__":
    sys.exit(main())
