from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from flsim.harness.config import Cell, SweepSpec, build_cell
from flsim.simulator import ThreatModel, attack_impact, run_experiment

log = logging.getLogger(__name__)

HEADER = ["mode", "rule", "attack", "threat", "M_percent", "N", "n", "alpha", "dp_mult", "seed",
          "A_theta", "A_theta_star", "I_theta", "rounds", "runtime_sec"]


@dataclass
class ResultRow:
    mode: str
    rule: str
    attack: str
    threat: str
    M_percent: float
    N: int
    n: int
    alpha: float
    dp_mult: float
    seed: int
    A_theta: Optional[float]
    A_theta_star: Optional[float]
    I_theta: Optional[float]
    rounds: int
    runtime_sec: Optional[float]
    cell_id: int = field(default=-1, compare=False)
    d_avg: Optional[float] = field(default=None, compare=False)
    error: Optional[str] = field(default=None, compare=False)

    def csv_values(self) -> list:
        return [_fmt(getattr(self, h)) for h in HEADER]

    @classmethod
    def from_csv(cls, record: dict) -> "ResultRow":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for h in HEADER:
            raw = record[h]
            t = types[h]
            if raw == "":
                kwargs[h] = None
            elif "int" in str(t):
                kwargs[h] = int(raw)
            elif "float" in str(t):
                kwargs[h] = float(raw)
            else:
                kwargs[h] = raw
        return cls(**kwargs)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _clean_key(cell: Cell) -> str:
    return json.dumps({"fl": repr(cell.fl), "data": repr(cell.layout)}, sort_keys=True)


_clean_cache: dict = {}


def run_cell(cell: Cell, timing: bool = False) -> tuple:
    """Run the attacked cell and its clean twin; returns (ResultRow, per-round records)."""
    start = time.perf_counter()
    key = _clean_key(cell)
    clean = _clean_cache.get(key)
    if clean is None:
        clean = run_experiment(cell.fl, ThreatModel(), cell.layout)
        _clean_cache[key] = clean
    if cell.threat.kind.value == "none":
        attacked = clean
    else:
        attacked = run_experiment(cell.fl, cell.threat, cell.layout)
    impact = attack_impact(clean, attacked)
    fl = cell.fl
    train_size = cell.layout.train_per_class * cell.layout.num_classes
    row = ResultRow(
        mode=fl.mode.value, rule=fl.rule.kind.value, attack=cell.threat.attack.kind.value,
        threat=cell.threat.kind.value, M_percent=float(cell.threat.M_percent), N=fl.N, n=fl.n,
        alpha=float(fl.alpha), dp_mult=float(cell.threat.attack.dp_mult), seed=fl.seed,
        A_theta=clean.A_theta_star, A_theta_star=attacked.A_theta_star, I_theta=impact, rounds=fl.rounds,
        runtime_sec=round(time.perf_counter() - start, 3) if timing else None, cell_id=cell.cell_id,
        d_avg=train_size / (fl.N * fl.users_per_silo),
    )
    rounds = []
    for variant, res in (("clean", clean), ("attacked", attacked)):
        for r in res.records:
            rec = asdict(r)
            rec.update(cell=cell.cell_id, variant=variant)
            rounds.append(rec)
    return row, rounds


def _error_row(cell: Cell, exc: BaseException) -> ResultRow:
    fl = cell.fl
    return ResultRow(
        mode=fl.mode.value, rule=fl.rule.kind.value, attack=cell.threat.attack.kind.value,
        threat=cell.threat.kind.value, M_percent=float(cell.threat.M_percent), N=fl.N, n=fl.n,
        alpha=float(fl.alpha), dp_mult=float(cell.threat.attack.dp_mult), seed=fl.seed,
        A_theta=None, A_theta_star=None, I_theta=None, rounds=fl.rounds, runtime_sec=None,
        cell_id=cell.cell_id, error=f"{type(exc).__name__}: {exc}",
    )


def _job(config: dict, coords: dict, cell_id: int, timing: bool):
    cell = build_cell(config, coords, cell_id)
    try:
        return run_cell(cell, timing)
    except Exception as exc:  # recorded as an error row; the sweep continues
        log.exception("cell %d failed", cell_id)
        return _error_row(cell, exc), []


class Ledger:
    """Append-only JSON-lines record of finished cells, used to resume sweeps."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def load(self) -> dict:
        done = {}
        if not self.path.exists():
            return done
        with open(self.path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    continue  # torn final line from an interrupted write
                done[entry["cell_id"]] = entry
        return done

    def append(self, cell: Cell, row: ResultRow, rounds: list):
        entry = {"cell_id": cell.cell_id, "coords": cell.coords, "row": asdict(row), "rounds": rounds}
        line = json.dumps(entry, default=_json_default) + "\n"
        with open(self.path, "a") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())


def _json_default(obj):
    if hasattr(obj, "item"):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj)}")


def run_sweep(spec: SweepSpec, parallelism: int = 1, out_dir=None, timing: bool = False,
              progress=None) -> list:
    """Run every cell (skipping ones already in ``out_dir``'s ledger); rows sorted by cell id.

    ``progress(row)`` is called after each newly finished cell.
    """
    return run_sweep_with_rounds(spec, parallelism, out_dir, timing, progress)[0]


def run_sweep_with_rounds(spec: SweepSpec, parallelism: int = 1, out_dir=None, timing: bool = False,
                          progress=None) -> tuple:
    """Like :func:`run_sweep` but also returns the per-cell round records."""
    cells = list(spec.cells())
    log.info("sweep has %d cells", len(cells))
    ledger = Ledger(Path(out_dir) / "ledger.jsonl") if out_dir is not None else None
    if ledger is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    done = ledger.load() if ledger else {}
    results: dict = {}
    by_id = {c.cell_id: c for c in cells}
    for cid, entry in done.items():
        cell = by_id.get(cid)
        if cell is None or entry["coords"] != json.loads(json.dumps(cell.coords)):
            continue  # ledger from a different sweep layout
        results[cid] = (ResultRow(**entry["row"]), entry["rounds"])
    todo = [c for c in cells if c.cell_id not in results]

    def finish(cell, row, rounds):
        results[cell.cell_id] = (row, rounds)
        if ledger is not None:
            ledger.append(cell, row, rounds)
        if progress is not None:
            progress(row)

    if parallelism <= 1 or len(todo) <= 1:
        for cell in todo:
            row, rounds = _job(spec.config, cell.coords, cell.cell_id, timing)
            finish(cell, row, rounds)
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = {pool.submit(_job, spec.config, c.coords, c.cell_id, timing): c for c in todo}
            for fut in as_completed(futures):
                row, rounds = fut.result()
                finish(futures[fut], row, rounds)
    ordered = [results[c.cell_id] for c in cells]
    return [r for r, _ in ordered], [rr for _, rr in ordered]


def write_results(rows: list, out_dir, rounds: Optional[list] = None):
    """Write ``results.csv``, ``rounds.jsonl``, ``errors.jsonl`` and ``plotdata/``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in rows:
            w.writerow(r.csv_values())
    with open(out / "rounds.jsonl", "w") as fh:
        for per_cell in rounds or []:
            for rec in per_cell:
                fh.write(json.dumps(rec, default=_json_default) + "\n")
    errors = [r for r in rows if r.error]
    with open(out / "errors.jsonl", "w") as fh:
        for r in errors:
            fh.write(json.dumps({"cell_id": r.cell_id, "error": r.error}) + "\n")
    write_plotdata(rows, out / "plotdata")


def read_results(path) -> list:
    with open(path, newline="") as fh:
        return [ResultRow.from_csv(rec) for rec in csv.DictReader(fh)]


PLOTS = {
    "M_vs_I": lambda r: r.M_percent,
    "dp_mult_vs_I": lambda r: r.dp_mult,
    "d_avg_vs_I": lambda r: r.d_avg,
}


def write_plotdata(rows: list, plot_dir):
    """One CSV per figure axis: (x, y, series) with y = mean I_theta over seeds."""
    plot_dir = Path(plot_dir)
    plot_dir.mkdir(parents=True, exist_ok=True)
    ok = [r for r in rows if r.I_theta is not None]
    for name, xfn in PLOTS.items():
        groups: dict = {}
        for r in ok:
            x = xfn(r)
            if x is None:
                continue
            groups.setdefault((f"{r.attack}/{r.rule}", x), []).append(r.I_theta)
        with open(plot_dir / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "series"])
            for (series, x), ys in sorted(groups.items()):
                w.writerow([repr(float(x)), repr(sum(ys) / len(ys)), series])


def plot_series(plot_csv) -> set:
    with open(plot_csv, newline="") as fh:
        return {rec["series"] for rec in csv.DictReader(fh)}
