"""Command-line entry point: ``ssdlab {gen-data,train,ablate,report}``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
Every run-config key can be overridden through an ``SSDLAB_<KEY>`` variable.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from xml.sax.saxutils import escape

from . import synthdata as sd
from .detector import DetectorConfig, save_checkpoint
from .metrics import REPORT_FIELDS, EvalReport
from .synthdata import ConfigError
from .trainer import MODES, NumericalFailure, TrainConfig, fit

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
ENV_PREFIX = "SSDLAB_"
N_FOLDS = 5
VERSION = "0.1.0"

ABLATION_GRIDS = {
    "sigma": ["0.2", "0.3", "0.4", "0.5"],
    "m": ["2", "4", "6", "8"],
    "k": ["2", "4", "6", "8"],
    "toggles": ["off", "qr", "pf", "both"],
    "similarity": ["on", "off"],
    "attention_placement": ["none", "both", "high", "low"],
}
TOGGLES = {"off": (False, False), "qr": (True, False), "pf": (False, True), "both": (True, True)}


@dataclass
class RunConfig:
    """Flat run description: run keys plus every TrainConfig and DetectorConfig field."""

    data_dir: str = "data"
    out_dir: str = "runs/run"
    label_fraction: float = 0.1
    fold: int = 0
    split_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if not 0 <= self.fold < N_FOLDS:
            raise ConfigError(f"fold must lie in [0, {N_FOLDS - 1}], got {self.fold}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("label_fraction must lie in (0, 1]")

    @property
    def run_name(self) -> str:
        return f"{self.train.mode}-f{self.fold}-s{self.train.seed}"

    def to_flat(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("train", "detector")}
        out.update(self.train.to_dict())
        out.update(asdict(self.detector))
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def _sections() -> dict:
    run = {f.name: f.default for f in fields(RunConfig) if f.name not in ("train", "detector")}
    return {"run": run, "train": TrainConfig().to_dict(), "detector": asdict(DetectorConfig())}


def run_config_schema() -> dict:
    """JSON-schema description of the flat run-config file."""
    kinds = {bool: "boolean", int: "integer", float: "number", str: "string", tuple: "array", list: "array"}
    props = {}
    for section, defaults in _sections().items():
        for key, value in defaults.items():
            props[key] = {"type": kinds[type(value)], "default": list(value) if isinstance(value, tuple) else value,
                          "section": section}
    props["mode"]["enum"] = list(MODES)
    return {"type": "object", "additionalProperties": False, "properties": props}


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, tuple):
        if isinstance(value, (list, tuple)) and len(value) == len(default):
            return tuple(value)
    raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")


def build_run_config(values: dict) -> RunConfig:
    """Validate a flat key/value mapping and split it into its sections."""
    sections = _sections()
    known = {k: s for s, d in sections.items() for k in d}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    parts = {s: {} for s in sections}
    for key, value in values.items():
        parts[known[key]][key] = _coerce(key, value, sections[known[key]][key])
    try:
        train = TrainConfig(**parts["train"])
        detector = DetectorConfig(**parts["detector"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(train=train, detector=detector, **parts["run"])


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        try:
            out[name[len(ENV_PREFIX):].lower()] = json.loads(raw)
        except json.JSONDecodeError:
            out[name[len(ENV_PREFIX):].lower()] = raw
    return out


def load_run_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """File values, then ``SSDLAB_*`` variables, then explicit overrides."""
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    values.update(env_overrides(environ))
    values.update(overrides or {})
    mode = values.get("mode")
    if mode is not None and mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    # the mode fixes the module toggles unless the file spells them out
    if mode is not None:
        defaults = TrainConfig.for_mode(mode)
        values.setdefault("query_refinement", defaults.query_refinement)
        values.setdefault("pseudo_filtering", defaults.pseudo_filtering)
    return build_run_config(values)


# -- training -------------------------------------------------------------------------------

def _write_csv(path: Path, rows: list[dict], header: list[str]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue())


def train_run(rc: RunConfig, out_dir=None, on_eval=None) -> dict:
    """Train one run into ``out_dir``; returns the manifest. Raises NumericalFailure on NaN."""
    out = Path(out_dir or rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = Path(rc.data_dir)
    if not (data / "header.json").exists():
        raise ConfigError(f"no dataset at {data}")
    train = sd.load(data, "train")
    test = sd.load(data, "test") if (data / "test.jsonl").exists() else None
    split_ = sd.split(train.ids, rc.label_fraction, rc.fold, rc.split_seed)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    (out / "evals").mkdir(exist_ok=True)
    rows: list[dict] = []
    manifest = {
        "run": rc.run_name,
        "version": VERSION,
        "config": rc.to_flat(),
        "detector_hash": rc.detector.hash(),
        "dataset_hash": sd.dataset_hash(data),
        "split": {"fraction": rc.label_fraction, "fold": rc.fold, "seed": rc.split_seed,
                  "n_labeled": len(split_.labeled), "n_unlabeled": len(split_.unlabeled)},
        "evals": [],
        "status": "running",
    }
    header = ["run", "checkpoint", *REPORT_FIELDS]

    def record(iteration: int, report: EvalReport):
        rows.append({"run": rc.run_name, "checkpoint": iteration, **report.csv_row()})
        _write_csv(out / "metrics.csv", rows, header)
        (out / "evals" / f"iter_{iteration:06d}.json").write_text(report.to_json())
        manifest["evals"].append({"iteration": iteration, **report.csv_row()})
        if on_eval is not None:
            on_eval(iteration, report)

    history: list[dict] = []
    start = time.perf_counter()
    try:
        result = fit(rc.train, rc.detector, train, test, split_, on_eval=None if test is None else record,
                     on_step=history.append)
    except NumericalFailure as exc:
        manifest.update(status="numerical_failure", failure={"message": str(exc), **exc.batch})
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
        raise
    finally:
        if history:
            _write_csv(out / "history.csv", history, list(dict.fromkeys(k for row in history for k in row)))
    save_checkpoint(result.state.teacher, ckpt_dir / "teacher.ckpt", {"iteration": result.state.iteration})
    save_checkpoint(result.state.student, ckpt_dir / "student.ckpt", {"iteration": result.state.iteration})
    manifest.update(status="ok", wall_seconds=round(time.perf_counter() - start, 3))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# -- ablation -------------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def ablation_overrides(param: str, value: str, base: TrainConfig) -> dict:
    """Train-config overrides for one grid value of ``param``."""
    if param == "sigma":
        return {"sigma": float(value)}
    if param == "m":
        m = int(value)
        return {"m": m, "k": min(base.k, m)}
    if param == "k":
        k = int(value)
        return {"k": k, "m": max(base.m, k)}
    if param == "toggles":
        if value not in TOGGLES:
            raise ConfigError(f"toggles value must be one of {sorted(TOGGLES)}")
        qr, pf = TOGGLES[value]
        return {"query_refinement": qr, "pseudo_filtering": pf}
    if param == "similarity":
        return {"similarity": _parse_bool(value)}
    if param == "attention_placement":
        return {"attention_placement": value}
    raise ConfigError(f"unknown ablation parameter {param!r}; choose from {sorted(ABLATION_GRIDS)}")


def _ablation_job(args) -> dict:
    flat, out_dir = args
    rc = build_run_config(flat)
    manifest = train_run(rc, out_dir)
    final = manifest["evals"][-1] if manifest["evals"] else {}
    return {"m": rc.train.m, "k": rc.train.k, **final}


def run_parallel(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def ablate(rc: RunConfig, param: str, values: list[str], seeds: list[int], out_dir, workers: int = 1) -> list[dict]:
    """One run per (value, seed); writes ``runs.csv`` and the merged ``ablation.csv``."""
    out = Path(out_dir)
    jobs, keys = [], []
    for value in values:
        over = ablation_overrides(param, value, rc.train)
        for seed in seeds:
            flat = rc.to_flat()
            flat.update(over, seed=seed)
            jobs.append((flat, str(out / f"{param}={value}" / f"seed{seed}")))
            keys.append((value, seed))
    for flat, _ in jobs:  # fail fast on a bad grid before spawning workers
        build_run_config(flat)
    results = run_parallel(_ablation_job, jobs, workers)
    out.mkdir(parents=True, exist_ok=True)
    per_run = [{"param": param, "value": v, "seed": s, **r} for (v, s), r in zip(keys, results)]
    metrics = ["mAP", "AP50", "AP75", "AP_small", "duplicate_rate"]
    _write_csv(out / "runs.csv", per_run, ["param", "value", "seed", "m", "k", *metrics])
    merged = []
    for value in values:
        rows = [r for r in per_run if r["value"] == value]
        entry = {"param": param, "value": value, "m": rows[0]["m"], "k": rows[0]["k"], "n_seeds": len(rows)}
        for name in metrics:
            xs = [float(r[name]) for r in rows if r.get(name) not in (None, "")]
            entry[f"{name}_mean"] = statistics.fmean(xs) if xs else ""
            entry[f"{name}_std"] = statistics.stdev(xs) if len(xs) > 1 else (0.0 if xs else "")
        merged.append(entry)
    header = ["param", "value", "m", "k", "n_seeds"] + [f"{n}_{s}" for n in metrics for s in ("mean", "std")]
    _write_csv(out / "ablation.csv", merged, header)
    return merged


# -- report ---------------------------------------------------------------------------------

def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def collect_rows(inputs: list) -> tuple[list[dict], dict]:
    """Final row per run directory, all rows of a CSV file; curves keyed by run name."""
    table, curves = [], {}
    for item in map(Path, inputs):
        if item.is_dir():
            rows = _read_rows(item / "metrics.csv") if (item / "metrics.csv").exists() else []
            if rows:
                table.append(rows[-1])
        elif item.is_file():
            rows = _read_rows(item)
            table.extend(rows)
        else:
            rows = []
        for r in rows:
            if "checkpoint" in r and "mAP" in r:
                curves.setdefault(r["run"], []).append((float(r["checkpoint"]), float(r["mAP"])))
    return table, curves


def render_svg(curves: dict, width: int = 480, height: int = 320) -> str:
    """Static line plot of mAP against iteration, one polyline per run."""
    pad = 48
    pts = [p for c in curves.values() for p in c]
    x_hi = max((p[0] for p in pts), default=1.0) or 1.0
    y_hi = max((p[1] for p in pts), default=1.0) or 1.0
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    def sx(x):
        return pad + (width - 2 * pad) * x / x_hi

    def sy(y):
        return height - pad - (height - 2 * pad) * y / y_hi

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">iteration (max {x_hi:g})</text>',
             f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})" '
             f'text-anchor="middle">mAP (max {y_hi:.3f})</text>']
    for i, (name, curve) in enumerate(sorted(curves.items())):
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(curve))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="10" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report(inputs: list, out_path) -> list[dict]:
    table, curves = collect_rows(inputs)
    if not table:
        raise ConfigError("no metrics found in the given runs")
    out = Path(out_path)
    header = list(table[0])
    suffix = out.suffix.lower()
    if suffix == ".csv":
        _write_csv(out, table, header)
    elif suffix == ".json":
        out.write_text(json.dumps(table, indent=2) + "\n")
    elif suffix == ".svg":
        out.write_text(render_svg(curves))
    else:
        raise ConfigError("report output must end in .csv, .json or .svg")
    return table


# -- argument handling ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssdlab", description="Semi-supervised set-prediction detection experiments on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--spec", help="scene spec JSON file")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=2000, help="training images")
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", help="flat run-config JSON")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--fold", type=int)
    t.add_argument("--out", help="run directory (overrides out_dir)")
    t.add_argument("--print-schema", action="store_true", help="print the run-config schema and exit")

    a = sub.add_parser("ablate", help="sweep one parameter over seeds")
    a.add_argument("--config")
    a.add_argument("--param", required=True)
    a.add_argument("--values", help="comma-separated grid; defaults to the standard grid")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    a.add_argument("--out", required=True)

    r = sub.add_parser("report", help="merge run metrics into a table or plot")
    r.add_argument("--runs", nargs="*", default=[])
    r.add_argument("--out", required=True)
    return p


def _gen_data(args) -> int:
    if args.n < 1 or args.n_test < 0:
        raise ConfigError("--n must be >= 1 and --n-test >= 0")
    spec_values = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.seed is not None:
        spec_values["seed"] = args.seed
    header = sd.generate(sd.SceneSpec.from_dict(spec_values), args.n, args.out, n_test=args.n_test)
    print(json.dumps({**header, "dataset_hash": sd.dataset_hash(args.out)}, indent=2, sort_keys=True))
    return EXIT_OK


def _train(args) -> int:
    if args.print_schema:
        print(json.dumps(run_config_schema(), indent=2, sort_keys=True))
        return EXIT_OK
    overrides = {k: v for k, v in (("mode", args.mode), ("fold", args.fold), ("out_dir", args.out)) if v is not None}
    rc = load_run_config(args.config, overrides)
    manifest = train_run(rc, on_eval=lambda i, r: print(f"{rc.run_name} iter {i}: mAP={r.mAP:.4f}", flush=True))
    print(json.dumps({"run": manifest["run"], "out_dir": str(rc.out_dir), "evals": manifest["evals"][-1:]}))
    return EXIT_OK


def _ablate(args) -> int:
    if args.param not in ABLATION_GRIDS:
        raise ConfigError(f"unknown ablation parameter {args.param!r}; choose from {sorted(ABLATION_GRIDS)}")
    rc = load_run_config(args.config)
    values = args.values.split(",") if args.values else ABLATION_GRIDS[args.param]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds: {exc}") from exc
    merged = ablate(rc, args.param, values, seeds, args.out, args.workers)
    print((Path(args.out) / "ablation.csv").read_text(), end="")
    return EXIT_OK if merged else EXIT_CONFIG


def _report(args) -> int:
    table = report(args.runs, args.out)
    print(f"wrote {len(table)} rows to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"gen-data": _gen_data, "train": _train, "ablate": _ablate, "report": _report}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}; batch {json.dumps(exc.batch, default=str)}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
