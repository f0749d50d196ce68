#!/usr/bin/env python3
"""Directional desk-scale study behind acceptance criteria 8, 9 and 10.

Runs every (mode, seed) job through ``ssdlab.cli.train_run`` and writes
``<out>/results.json``. Results carry a hash of the study configuration and of
the package sources, so stale results are detected and recomputed.

    python scripts/run_study.py --out study --workers 4
"""
from __future__ import annotations

import argparse
import hashlib
import heapq
import json
import os
import statistics
import time
from pathlib import Path

from ssdlab import cli
from ssdlab import synthdata as sd

SRC = Path(cli.__file__).resolve().parent
SEEDS = (0, 1, 2)
N_TRAIN, N_TEST = 2000, 500
BUDGET_MINUTES = 45.0
PROJECTED_WORKERS = 4

# desk-scale detector used by every study run (tuned on supervised mAP only)
DETECTOR = dict(d_model=64, n_heads=4, n_decoder_layers=3, n_queries=20, ffn_dim=128, enc_hidden=256,
                spatial_prior=0.25)
TRAIN = dict(total_iterations=6000, stage_switch_iteration=3000, labeled_batch=2, unlabeled_batch=8,
             eval_every=1000)
DATASETS = {"default": {}, "small_quota": {"small_quota": 0.5}}

# name -> (dataset, mode, extra train overrides)
GROUPS = {
    "supervised": ("default", "supervised", {}),
    "baseline_ssod": ("default", "baseline_ssod", {}),
    "sparse_ssod": ("default", "sparse_ssod", {}),
    "baseline_o2m": ("default", "baseline_ssod", {"stage_switch_iteration": TRAIN["total_iterations"]}),
    "small_baseline_ssod": ("small_quota", "baseline_ssod", {}),
    "small_sparse_ssod": ("small_quota", "sparse_ssod", {}),
}
PARTS = {
    "directional": ("supervised", "baseline_ssod", "sparse_ssod"),
    "duplicates": ("sparse_ssod", "baseline_o2m"),
    "small": ("small_baseline_ssod", "small_sparse_ssod"),
}


def source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(SRC.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def study_fingerprint() -> str:
    blob = json.dumps({"detector": DETECTOR, "train": TRAIN, "datasets": DATASETS, "groups": GROUPS,
                       "seeds": SEEDS, "n": [N_TRAIN, N_TEST], "src": source_hash()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def ensure_data(root: Path, name: str) -> Path:
    d = root / f"data_{name}"
    if not (d / "header.json").exists():
        sd.generate(sd.SceneSpec.from_dict(DATASETS[name]), N_TRAIN, d, n_test=N_TEST)
    return d


def job_flat(root: Path, group: str, seed: int) -> dict:
    dataset, mode, extra = GROUPS[group]
    defaults = cli.TrainConfig.for_mode(mode)
    flat = {**DETECTOR, **TRAIN, **extra, "mode": mode, "seed": seed,
            "query_refinement": defaults.query_refinement, "pseudo_filtering": defaults.pseudo_filtering,
            "data_dir": str(root / f"data_{dataset}"), "out_dir": str(root / "runs" / group / f"seed{seed}"),
            "label_fraction": 0.1}
    return flat


def _job(args):
    group, seed, flat = args
    start = time.perf_counter()
    manifest = cli.train_run(cli.build_run_config(flat))
    return {"group": group, "seed": seed, "seconds": time.perf_counter() - start, "evals": manifest["evals"]}


def lpt_makespan(durations, workers: int) -> float:
    """Longest-processing-time-first schedule of independent jobs onto ``workers`` identical workers."""
    loads = [0.0] * workers
    heapq.heapify(loads)
    for d in sorted(durations, reverse=True):
        heapq.heappush(loads, heapq.heappop(loads) + d)
    return max(loads) if durations else 0.0


def _mean(xs):
    xs = [x for x in xs if x is not None and x != ""]
    return statistics.fmean(float(x) for x in xs) if xs else None


def summarize(runs: list[dict]) -> dict:
    by_group: dict = {}
    for r in runs:
        by_group.setdefault(r["group"], []).append(r)
    out = {}
    for group, rs in by_group.items():
        finals = [r["evals"][-1] for r in rs]
        out[group] = {
            "seeds": [r["seed"] for r in rs],
            "mAP": _mean(f["mAP"] for f in finals),
            "AP_small": _mean(f["AP_small"] for f in finals),
            "duplicate_rate": _mean(f["duplicate_rate"] for f in finals),
            "per_seed_mAP": [f["mAP"] for f in finals],
            "seconds": [r["seconds"] for r in rs],
        }
    return out


def run_study(root, workers: int = 1, parts=tuple(PARTS)) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name in {GROUPS[g][0] for p in parts for g in PARTS[p]}:
        ensure_data(root, name)
    groups = list(dict.fromkeys(g for p in parts for g in PARTS[p]))
    jobs = [(g, s, job_flat(root, g, s)) for g in groups for s in SEEDS]
    # longest jobs first keeps the real pool close to the LPT projection
    jobs.sort(key=lambda j: j[2]["mode"] == "supervised")
    start = time.perf_counter()
    runs = cli.run_parallel(_job, jobs, workers)
    wall = time.perf_counter() - start
    directional = [r["seconds"] for r in runs if r["group"] in PARTS["directional"]]
    results = {
        "fingerprint": study_fingerprint(),
        "parts": list(parts),
        "workers_used": workers,
        "cpu_count": os.cpu_count(),
        "wall_seconds": wall,
        "directional_run_seconds": directional,
        "directional_projected_minutes": lpt_makespan(directional, PROJECTED_WORKERS) / 60.0,
        "groups": summarize(runs),
        "runs": runs,
    }
    (root / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return results


def load_or_run(root, workers: int = 1) -> dict:
    path = Path(root) / "results.json"
    if path.exists():
        cached = json.loads(path.read_text())
        if cached.get("fingerprint") == study_fingerprint() and set(cached.get("parts", ())) >= set(PARTS):
            return cached
    return run_study(root, workers)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="study")
    ap.add_argument("--workers", type=int, default=min(PROJECTED_WORKERS, os.cpu_count() or 1))
    ap.add_argument("--parts", default=",".join(PARTS))
    ap.add_argument("--force", action="store_true", help="ignore cached results")
    args = ap.parse_args(argv)
    parts = tuple(p for p in args.parts.split(",") if p)
    if args.force or set(parts) != set(PARTS):
        res = run_study(args.out, args.workers, parts)
    else:
        res = load_or_run(args.out, args.workers)
    print(json.dumps({k: res[k] for k in ("fingerprint", "wall_seconds", "directional_projected_minutes")}, indent=2))
    print(json.dumps(res["groups"], indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
