"""``flsim`` command line: run, validate, gen-config, replay."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from flsim.errors import FlsimError
from flsim.harness.config import apply_overrides, parse_config, render_default_config
from flsim.harness.sweep import read_results, run_cell, run_sweep_with_rounds, write_results

log = logging.getLogger("flsim")


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("FLSIM_OUT_DIR", "flsim_out"))


def cmd_run(args) -> int:
    spec = apply_overrides(parse_config(args.config), args.seed, args.rounds_override)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    print(f"sweep: {spec.size} cells -> {out}")
    (out / "sweep.yaml").write_text(Path(args.config).read_text())

    def progress(row):
        status = f"I_theta={row.I_theta:.4f}" if row.error is None else f"ERROR {row.error}"
        print(f"  cell {row.cell_id}: {row.attack}/{row.rule} M={row.M_percent} seed={row.seed} {status}")

    rows, rounds = run_sweep_with_rounds(spec, args.parallelism, out, args.timing, progress)
    write_results(rows, out, rounds)
    failed = [r for r in rows if r.error]
    if failed:
        print(f"{len(failed)} of {len(rows)} cells failed:", file=sys.stderr)
        for r in failed:
            print(f"  cell {r.cell_id}: {r.error}", file=sys.stderr)
        return 1
    print(f"wrote {out / 'results.csv'}")
    return 0


def cmd_validate(args) -> int:
    spec = apply_overrides(parse_config(args.config), args.seed, args.rounds_override)
    print(f"ok: {spec.size} cells")
    return 0


def cmd_gen_config(args) -> int:
    text = render_default_config()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_replay(args) -> int:
    results = Path(args.results)
    config = Path(args.config) if args.config else results.parent / "sweep.yaml"
    spec = apply_overrides(parse_config(config), args.seed, args.rounds_override)
    rows = read_results(results)
    if not 0 <= args.cell < len(rows):
        print(f"no cell {args.cell} in {results}", file=sys.stderr)
        return 2
    cell = spec.cell(args.cell)
    row, _ = run_cell(cell)
    print("recorded:", rows[args.cell].csv_values())
    print("replayed:", row.csv_values())
    return 0 if row == rows[args.cell] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the config seed (replaces the seeds axis)")
        p.add_argument("--rounds-override", type=int, default=None, help="override fl.rounds")

    p = sub.add_parser("run", help="run a sweep")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output directory (default $FLSIM_OUT_DIR or ./flsim_out)")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="fill runtime_sec (makes results.csv non-reproducible)")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a config and report the cell count")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen-config", help="print the annotated default config")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_gen_config)

    p = sub.add_parser("replay", help="re-run one cell of a finished sweep")
    p.add_argument("results")
    p.add_argument("--cell", type=int, required=True)
    p.add_argument("--config", default=None, help="sweep config (default: sweep.yaml next to results.csv)")
    common(p)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FlsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
