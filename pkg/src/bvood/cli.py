"""Command-line interface: gen-data, sweep, select, detect, report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import container, plotting
from .config import EXAMPLE, ConfigError, load_config
from .detector import DetectorChain, detect_chain
from .factorgen import Dataset, PartitionSpec, generate_partition
from .selection import (SweepRecord, calibrate_threshold, run_sweep, select_detector)

log = logging.getLogger("bvood")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SPLITS = ("train", "validation", "test1", "test2")
SWEEP_COLUMNS = ["beta", "nLatent", "final_loss", "val_mse", "avg_kl", "status", "model"]
LOG_COLUMNS = ["image_id", "factor", "score", "flag", "duration_us"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(x: float) -> str:
    return repr(float(x))


# gen-data

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = generate_partition(cfg.partition)
    for name in SPLITS:
        ds = splits[name]
        if len(ds) == 0:
            log.warning("split %s is empty; no file written", name)
            continue
        container.save(ds, out / f"{name}.bvod")
        print(f"{name}: {len(ds)} images")
    meta = asdict(cfg.partition)
    (out / "partition.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# sweep

def _load_split(data_dir: Path, name: str) -> Dataset:
    path = data_dir / f"{name}.bvod"
    if not path.exists():
        raise UsageError(f"missing dataset file {path}")
    ds = container.load(path)
    if not isinstance(ds, Dataset):
        raise UsageError(f"{path} is not a dataset container")
    return ds


def write_sweep_table(records: list[SweepRecord], path: Path, model_files: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r, f in zip(records, model_files):
            w.writerow([_fmt(r.beta), r.n_latent, _fmt(r.final_loss), _fmt(r.val_mse),
                        _fmt(r.avg_kl), "ok" if r.ok else f"failed: {r.error}", f])


def read_sweep_table(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["beta"] = float(row["beta"])
        row["nLatent"] = int(row["nLatent"])
        for k in ("final_loss", "val_mse", "avg_kl"):
            row[k] = float(row[k])
    return rows


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    data = Path(args.data)
    train_set = _load_split(data, "train")
    validation = _load_split(data, "validation")
    out = Path(args.out)
    (out / "models").mkdir(parents=True, exist_ok=True)
    started = time.time()
    records = run_sweep(cfg.grid, train_set, validation, cfg.train, jobs=args.jobs)
    files = []
    for i, r in enumerate(records):
        if r.ok:
            name = f"models/cell_{i:03d}.bvod"
            container.save(r.model, out / name)
            files.append(name)
        else:
            files.append("")
    write_sweep_table(records, out / "sweep.csv", files)
    with open(out / "traces.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "epoch", "loss"])
        for i, r in enumerate(records):
            for e, loss in enumerate(r.trace):
                w.writerow([i, e, _fmt(loss)])
    ok = [r for r in records if r.ok]
    if ok:
        plotting.sweep_metrics([{"beta": r.beta, "nLatent": r.n_latent, "avg_kl": r.avg_kl,
                                 "val_mse": r.val_mse} for r in ok], out / "sweep.svg")
    print(f"{len(ok)}/{len(records)} cells trained in {time.time() - started:.1f}s")
    for r in records:
        status = "ok" if r.ok else r.error
        print(f"  beta={r.beta:g} nLatent={r.n_latent}: loss={r.final_loss:.4g} "
              f"val_mse={r.val_mse:.4g} avg_kl={r.avg_kl:.4g} [{status}]")
    return EXIT_OK if ok else EXIT_RUNTIME


# select

def _write_values(path: Path, ids, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "kl"])
        for i, v in zip(ids, values):
            w.writerow([int(i), _fmt(v)])


def cmd_select(args) -> int:
    sweep_dir, data = Path(args.sweep), Path(args.data)
    table = sweep_dir / "sweep.csv"
    if not table.exists():
        raise UsageError(f"missing sweep table {table}")
    rows = read_sweep_table(table)
    records = []
    for row in rows:
        if row["status"] != "ok":
            continue
        model = container.load(sweep_dir / row["model"])
        records.append(SweepRecord(row["beta"], row["nLatent"], row["final_loss"],
                                   row["val_mse"], row["avg_kl"], model))
    if not records:
        raise UsageError("sweep contains no successful models")
    factor = args.factor
    if factor is None:
        meta = data / "partition.json"
        if not meta.exists():
            raise UsageError("pass --factor or provide partition.json in the data directory")
        factor = json.loads(meta.read_text())["factor"]
    weights = tuple(float(w) for w in args.weights.split(","))
    if len(weights) != 2:
        raise UsageError("--weights needs two comma-separated values")
    train_set = _load_split(data, "train")
    validation = _load_split(data, "validation")
    sel = select_detector(factor, records, train_set, validation, args.percentile, weights)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    container.save(sel.spec, out)
    stem = out.with_suffix("")
    _write_values(Path(f"{stem}_train_kl.csv"), train_set.scene_ids, sel.train_kl)
    _write_values(Path(f"{stem}_validation_kl.csv"), validation.scene_ids, sel.val_kl)
    with open(f"{stem}_kl_diff.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["latent", "kl_diff"])
        for j, d in enumerate(sel.diffs):
            w.writerow([j, _fmt(d)])
    s = sel.spec
    print(f"factor={s.factor} beta={s.beta:g} nLatent={s.n_latent} latent={s.latent} "
          f"tau={s.tau:.6g} percentile={s.percentile}")
    return EXIT_OK


# detect

def _iter_inputs(source: str):
    """Yield (split name, dataset) pairs from a directory, a file, or stdin ('-')."""
    if source == "-":
        data = sys.stdin.buffer.read()
        if data:
            ds = container.from_bytes(data)
            yield (ds.name or "stdin"), ds
        return
    path = Path(source)
    if not path.exists():
        raise UsageError(f"input {path} does not exist")
    files = sorted(path.glob("*.bvod")) if path.is_dir() else [path]
    for f in files:
        obj = container.load(f)
        if not isinstance(obj, Dataset):
            log.warning("skipping %s: not a dataset container", f)
            continue
        yield f.stem, obj


def cmd_detect(args) -> int:
    paths = [Path(p) for p in args.specs.split(",") if p]
    missing = [str(p) for p in paths if not p.exists()]
    if missing or not paths:
        raise UsageError(f"missing spec file(s): {', '.join(missing) or '(none given)'}")
    specs = [container.load(p) for p in paths]
    chain = DetectorChain(specs, parallel=args.parallel)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    fresh = not report.exists() or report.stat().st_size == 0
    summary: dict[str, dict[str, list[int]]] = {}
    with open(report, "a", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(LOG_COLUMNS)
        for split, ds in _iter_inputs(args.input):
            counts = summary.setdefault(split, {f: [0, 0] for f in chain.factors})
            for image in ds:
                res = detect_chain(chain, image, f"{split}:{image.scene_id}")
                for factor, o in res.outcomes.items():
                    if o.error:
                        log.warning("%s %s: %s", res.image_id, factor, o.error)
                        w.writerow([res.image_id, factor, "nan", "error", f"{o.duration_us:.1f}"])
                        continue
                    w.writerow([res.image_id, factor, _fmt(o.score), int(o.is_ood),
                                f"{o.duration_us:.1f}"])
                    counts[factor][0] += int(o.is_ood)
                    counts[factor][1] += 1
    if not summary:
        print("no input images")
        for f in chain.factors:
            print(f"  {f}: 0/0 flagged OOD")
    for split, counts in summary.items():
        print(f"{split}:")
        for f, (flagged, n) in counts.items():
            pct = 100.0 * flagged / n if n else 0.0
            print(f"  {f}: {flagged}/{n} flagged OOD ({pct:.1f}%)")
    return EXIT_OK


# report

def read_values(path: Path) -> list[float]:
    """KL values from a delimited file; the ``kl`` column, else the last one."""
    values = []
    with open(path, newline="") as fh:
        text = fh.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    col = -1
    if header is not None:
        if "kl" in header:
            col = header.index("kl")
        else:
            try:
                values.append(float(header[-1]))
            except (ValueError, IndexError):
                log.warning("%s: skipping header-like row %r", path, header)
    for lineno, row in enumerate(reader, start=2):
        try:
            v = float(row[col])
            if not np.isfinite(v):
                raise ValueError
            values.append(v)
        except (ValueError, IndexError):
            log.warning("%s:%d: skipping malformed row %r", path, lineno, row)
    return values


def cmd_report(args) -> int:
    series = {}
    for p in args.inputs:
        path = Path(p)
        if not path.exists():
            raise UsageError(f"missing input {path}")
        series[path.stem] = read_values(path)
    tau = args.tau
    if tau is None and args.spec:
        tau = container.load(args.spec).tau
    first = next(iter(series.values()))
    if tau is None and first:
        tau = calibrate_threshold(first, args.percentile)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    svg = out.with_suffix(".svg")
    edges, counts = plotting.kl_histogram(series, tau, svg, bins=args.bins)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", *counts])
        for i in range(len(edges) - 1):
            w.writerow([_fmt(edges[i]), _fmt(edges[i + 1]), *(int(c[i]) for c in counts.values())])
    if args.sweep:
        rows = [r for r in read_sweep_table(Path(args.sweep)) if r["status"] == "ok"]
        if rows:
            plotting.sweep_metrics(rows, Path(f"{out.with_suffix('')}_sweep.svg"))
    tau_text = "none" if tau is None else f"{tau:.6g}"
    print(f"wrote {svg} and {out.with_suffix('.csv')} (tau={tau_text})")
    for name, c in counts.items():
        print(f"  {name}: {int(c.sum())} values")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bvood", description="beta-VAE latent-space OOD detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate partition splits")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("sweep", help="train one model per (beta, nLatent) cell")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("select", help="pick model and latent, calibrate tau")
    c.add_argument("--sweep", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--percentile", type=int, default=75)
    c.add_argument("--weights", default="1,1", help="w_mse,w_kl")
    c.add_argument("--factor", default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_select)

    d = sub.add_parser("detect", help="run a detector chain over images")
    d.add_argument("--specs", required=True, help="comma-separated spec files")
    d.add_argument("--input", required=True, help="dataset directory, file, or '-' for stdin")
    d.add_argument("--report", required=True)
    d.add_argument("--parallel", action="store_true")
    d.set_defaults(func=cmd_detect)

    r = sub.add_parser("report", help="KL histogram figure and binned counts")
    r.add_argument("--in", dest="inputs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--tau", type=float, default=None)
    r.add_argument("--spec", default=None)
    r.add_argument("--percentile", type=int, default=75)
    r.add_argument("--bins", type=int, default=30)
    r.add_argument("--sweep", default=None, help="sweep.csv to plot alongside")
    r.set_defaults(func=cmd_report)

    e = sub.add_parser("example-config", help="print an example run config")
    e.set_defaults(func=lambda a: print(EXAMPLE, end="") or EXIT_OK)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except container.ContainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
