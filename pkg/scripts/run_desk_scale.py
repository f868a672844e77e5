"""Run the default desk-scale comparison suite.

One baseline (T steps) plus incremental regimes S in {2, 4, 8} per seed;
each incremental run extends exactly to its equal-compute step, so its
final validation loss is the equal-compute measurement. Completed runs are
skipped and interrupted runs resume from their last checkpoint, so the
driver can simply be re-invoked.

Expect roughly ten hours on two CPU cores for the full 3-seed suite.

Usage: python scripts/run_desk_scale.py --data corpus --out results/desk_scale
"""

import argparse
import json
import os
import platform
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from incgpt import costs, harness, plots
from incgpt.config import write_toml

DESK_MODEL = {"n_layers": 8, "d_model": 128, "n_heads": 4, "context_len": 256,
              "precision": "fast32"}
DESK_BATCH = {"batch_size": 32, "seq_len": 256}
DESK_OPTIM = {"lr": 6e-4, "weight_decay": 0.1, "beta1": 0.9, "beta2": 0.95,
              "warmup_steps": 100, "grad_clip_norm": 1.0}


def perf_env():
    """Environment tuned for the 2-core training loop; numerics depend on
    the BLAS kernel choice, so the settings are recorded with the results."""
    env = dict(os.environ)
    env.setdefault("OMP_WAIT_POLICY", "passive")
    env.setdefault("OPENBLAS_THREAD_TIMEOUT", "1")
    env.setdefault("MALLOC_MMAP_THRESHOLD_", str(2 << 30))
    env.setdefault("MALLOC_TRIM_THRESHOLD_", str(2 << 30))
    try:
        cpuinfo = Path("/proc/cpuinfo").read_text()
        if "avx512f" in cpuinfo:
            env.setdefault("OPENBLAS_CORETYPE", "SKYLAKEX")
    except OSError:
        pass
    return env


def run_length(steps, stages):
    """Total steps for an incremental regime: out to its equal-compute point."""
    params = costs.make_params(DESK_MODEL["n_layers"], stages, steps_baseline=steps)
    _, equal_step = costs.continual_tokens_to_match(params)
    return equal_step


def make_config(regime, stages, steps, seed, data_dir, out_dir,
                eval_every, checkpoint_every):
    reg = {"kind": regime, "steps": steps}
    if regime == "incremental":
        reg["stages"] = stages
        reg["steps_continual"] = run_length(steps, stages) - steps
    return write_toml({
        "model": dict(DESK_MODEL, init_seed=seed),
        "optim": DESK_OPTIM,
        "batch": DESK_BATCH,
        "regime": reg,
        "run": {
            "seed": seed,
            "eval_every": eval_every,
            "eval_batches": 8,
            "checkpoint_every": checkpoint_every,
            "data_dir": str(data_dir),
            "out_dir": str(out_dir),
        },
    })


def trace_complete(out_dir):
    trace = out_dir / "trace.csv"
    meta = out_dir / "meta.json"
    if not trace.exists() or not meta.exists():
        return False
    total = json.loads(meta.read_text())["total_steps"]
    lines = trace.read_text().splitlines()
    return len(lines) >= total + 1 and lines[-1].split(",")[0] == str(total)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="corpus")
    ap.add_argument("--out", default="results/desk_scale")
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--stages", type=int, nargs="+", default=[2, 4, 8])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--eval-every", type=int, default=100)
    ap.add_argument("--checkpoint-every", type=int, default=500)
    ap.add_argument("--keep-checkpoints", action="store_true")
    args = ap.parse_args()

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    env = perf_env()

    runs = []
    for seed in args.seeds:
        runs.append((seed, "baseline", None))
        for s in args.stages:
            runs.append((seed, f"S{s}", s))

    t0 = time.time()
    for i, (seed, name, stages) in enumerate(runs, 1):
        out_dir = out_root / f"seed{seed}" / name
        if trace_complete(out_dir):
            print(f"[{i}/{len(runs)}] {out_dir} already complete, skipping",
                  flush=True)
            continue
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg_path = out_dir / "run_config.toml"
        cfg_path.write_text(make_config(
            "baseline" if stages is None else "incremental",
            stages, args.steps, seed, args.data, out_dir,
            args.eval_every, args.checkpoint_every,
        ))
        print(f"[{i}/{len(runs)}] {out_dir} starting "
              f"({time.time() - t0:.0f}s elapsed)", flush=True)
        subprocess.run(
            [sys.executable, "-m", "incgpt.cli", "run",
             "--config", str(cfg_path), "--log-every", "250"],
            env=env, check=True,
        )
        if not args.keep_checkpoints and trace_complete(out_dir):
            (out_dir / "checkpoint.bin").unlink(missing_ok=True)

    # provenance for the recorded results
    np_cfg = np.__config__.CONFIG if hasattr(np.__config__, "CONFIG") else {}
    (out_root / "environment.json").write_text(json.dumps({
        "python": sys.version,
        "platform": platform.platform(),
        "numpy": np.__version__,
        "blas": str(np_cfg.get("Build Dependencies", {}).get("blas", {})),
        "env": {k: env[k] for k in sorted(env)
                if k.startswith(("OMP_", "OPENBLAS_", "MALLOC_", "INCGPT_"))},
        "driver_args": vars(args) | {"data": str(args.data), "out": str(args.out)},
    }, indent=2, default=str) + "\n")

    # per-seed comparison reports and plots
    summary = {"steps": args.steps, "seeds": {}, "stages": args.stages}
    for seed in args.seeds:
        seed_dir = out_root / f"seed{seed}"
        base = harness.RunTrace.load(seed_dir / "baseline" / "trace.csv")
        incs = []
        for s in args.stages:
            tr = harness.RunTrace.load(seed_dir / f"S{s}" / "trace.csv")
            tr.meta["label"] = f"S{s}"
            incs.append(tr)
        report = harness.compare(base, incs, args.steps)
        (seed_dir / "comparison.json").write_text(
            json.dumps(report.to_dict(), indent=2) + "\n")
        print(f"--- seed {seed}\n{report.to_text()}", flush=True)
        traces = {"baseline": base}
        traces.update({f"S{s}": tr for s, tr in zip(args.stages, incs)})
        markers = [(r.label, r.equal_step) for r in report.rows
                   if r.equal_step is not None]
        plots.emit_plots(traces, markers, seed_dir / "losses.svg")
        summary["seeds"][str(seed)] = report.to_dict()

    (out_root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"suite complete in {(time.time() - t0) / 3600:.2f} h", flush=True)


if __name__ == "__main__":
    main()
