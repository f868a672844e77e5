"""Experiment orchestration: training runs, traces, and equal-compute
comparison.

A run executes the directives of its schedule step by step, meters exact
cost as it goes, appends one CSV row per step (atomically, so partial runs
are analyzable), checkpoints periodically, and can resume from the last
checkpoint to reproduce the uninterrupted trace from that point onward.
"""

import json
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from incgpt import checkpoint as ckpt
from incgpt import costs, data, model, ops, optim, schedule
from incgpt.config import TrainConfig, echo_train_config, write_toml
from incgpt.errors import ConfigError, DataError, NumericError

TRACE_HEADER = "step,tokens,cum_cost,mode,train_loss,val_loss"


@dataclass
class TraceRow:
    step: int                # 1-based: row k is the state after k steps
    tokens: int
    cum_cost: Fraction
    mode: str
    train_loss: float
    val_loss: float | None

    def to_csv(self):
        val = "" if self.val_loss is None else repr(self.val_loss)
        return (f"{self.step},{self.tokens},{self.cum_cost},"
                f"{self.mode},{repr(self.train_loss)},{val}")

    @classmethod
    def from_csv(cls, line):
        step, tokens, cum_cost, mode, train_loss, val_loss = line.split(",")
        return cls(
            step=int(step),
            tokens=int(tokens),
            cum_cost=Fraction(cum_cost),
            mode=mode,
            train_loss=float(train_loss),
            val_loss=float(val_loss) if val_loss else None,
        )


@dataclass
class RunTrace:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def loss_series(self):
        return [(r.step, r.train_loss) for r in self.rows]

    def val_series(self):
        return [(r.step, r.val_loss) for r in self.rows if r.val_loss is not None]

    def row_at_step(self, step):
        for r in self.rows:
            if r.step == step:
                return r
        return None

    def save_csv(self, path):
        lines = [TRACE_HEADER] + [r.to_csv() for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, trace_path, meta_path=None):
        trace_path = Path(trace_path)
        lines = trace_path.read_text().splitlines()
        if not lines or lines[0] != TRACE_HEADER:
            raise DataError(f"{trace_path}: not a trace CSV")
        rows = [TraceRow.from_csv(line) for line in lines[1:]]
        meta = {}
        if meta_path is None:
            candidate = trace_path.parent / "meta.json"
            meta_path = candidate if candidate.exists() else None
        if meta_path is not None:
            meta = json.loads(Path(meta_path).read_text())
        return cls(rows=rows, meta=meta)


def resolve_out_dir(out_dir):
    """Apply the INCGPT_OUT_ROOT override to relative output paths."""
    out_dir = Path(out_dir)
    root = os.environ.get("INCGPT_OUT_ROOT")
    if root and not out_dir.is_absolute():
        return Path(root) / out_dir
    return out_dir


def build_schedule(cfg):
    if cfg.regime == "baseline":
        return schedule.baseline_plan(cfg.model.n_layers, cfg.steps)
    return schedule.build_plan(
        cfg.model.n_layers, cfg.n_stages, cfg.steps,
        cfg.steps_continual, cfg.phase_split,
    )


def plan_echo(cfg, plan):
    """Schedule metadata as TOML-style text, for reproducibility."""
    body = {
        "regime": cfg.regime,
        "n_layers": cfg.model.n_layers,
        "total_steps": plan.total_steps,
    }
    if cfg.regime == "incremental":
        body.update({
            "n_stages": plan.n_stages,
            "layers_per_stage": plan.layers_per_stage,
            "steps_incremental": plan.steps_incremental,
            "steps_continual": plan.steps_continual,
            "phase_split": str(plan.phase_split),
            "stage_boundaries": [list(b) for b in plan.boundaries],
        })
    return write_toml({"plan": body})


def evaluate(store, depth, val_cursor, n_batches):
    """Mean val loss over the fixed leading batches of the val stream."""
    total = 0.0
    for k in range(n_batches):
        inputs, targets = val_cursor.batch_at(k)
        logits, _ = model.forward(store, inputs, depth)
        loss, _ = ops.cross_entropy_logits(logits, targets)
        total += loss
    return total / n_batches


class _TraceWriter:
    """Appends rows to trace.csv, one flushed line per step."""

    def __init__(self, path, fresh):
        self.path = Path(path)
        if fresh or not self.path.exists():
            self.path.write_text(TRACE_HEADER + "\n")
        self.fh = open(self.path, "a", buffering=1)

    def append(self, row):
        self.fh.write(row.to_csv() + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _truncate_trace(path, keep_steps):
    """Drop trace rows past the checkpointed step (crash between row write
    and checkpoint write); returns the kept rows."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != TRACE_HEADER:
        raise DataError(f"{path}: not a trace CSV")
    rows = [TraceRow.from_csv(l) for l in lines[1:]]
    kept = [r for r in rows if r.step <= keep_steps]
    if len(kept) != len(rows):
        tmp = Path(str(path) + ".tmp")
        tmp.write_text("\n".join([TRACE_HEADER] + [r.to_csv() for r in kept]) + "\n")
        tmp.replace(path)
    return kept


def run(cfg, log_every=100, log=True):
    """Execute (or resume) one training run; returns the full RunTrace."""
    out_dir = resolve_out_dir(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = build_schedule(cfg)
    tps = cfg.batch.tokens_per_step

    train_stream = data.load_cache(Path(cfg.data_dir) / "train")
    cursor = data.BatchCursor(train_stream, cfg.batch, cfg.seed)
    val_cursor = None
    if cfg.eval_batches > 0:
        val_stream = data.load_cache(Path(cfg.data_dir) / "val")
        if len(val_stream) >= cfg.batch.tokens_per_step + 1:
            val_cursor = data.BatchCursor(val_stream, cfg.batch, cfg.seed)

    meta = {
        "regime": cfg.regime,
        "n_stages": cfg.n_stages if cfg.regime == "incremental" else None,
        "steps": cfg.steps,
        "steps_continual": cfg.steps_continual,
        "total_steps": plan.total_steps,
        "n_layers": cfg.model.n_layers,
        "tokens_per_step": tps,
        "seed": cfg.seed,
        "init_seed": cfg.model.init_seed,
        "precision": cfg.model.precision,
        "backward_ratio": str(cfg.backward_ratio),
        "train_digest": train_stream.source_digest,
        "cost_unit": "block-layer-tokens",
    }

    ckpt_path = out_dir / "checkpoint.bin"
    trace_path = out_dir / "trace.csv"

    rows = []
    if ckpt_path.exists():
        store, opt_state, run_state = ckpt.load_checkpoint(ckpt_path)
        if store.cfg != cfg.model:
            raise ConfigError(
                f"checkpoint in {out_dir} was written by a different model config"
            )
        start_step = run_state["step"]
        cum_cost = run_state["cum_cost"]
        rows = _truncate_trace(trace_path, start_step)
        writer = _TraceWriter(trace_path, fresh=False)
    else:
        store = model.init_model(cfg.model)
        opt_state = optim.OptState()
        start_step = 0
        cum_cost = Fraction(0)
        (out_dir / "config.toml").write_text(echo_train_config(cfg))
        (out_dir / "plan.toml").write_text(plan_echo(cfg, plan))
        (out_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        writer = _TraceWriter(trace_path, fresh=True)

    t_last = time.perf_counter()
    try:
        for step_idx in range(start_step, plan.total_steps):
            directive = plan.directive_at(step_idx)
            store.set_trainable(directive.train_embeddings_head,
                                directive.grad_depth_lo, directive.active_depth)
            new_groups = [g for g in store.group_names()
                          if store.trainable[g] and not opt_state.has(g)]
            if new_groups:
                optim.register_new_groups(opt_state, store, new_groups)

            inputs, targets = cursor.batch_at(step_idx)
            logits, tape = model.forward(store, inputs, directive.active_depth)
            train_loss, xent = ops.cross_entropy_logits(logits, targets)

            step_no = step_idx + 1
            cum_cost += tps * costs.step_cost_per_token(
                directive.active_depth, directive.grad_depth_lo,
                backward_ratio=cfg.backward_ratio,
            )

            if not np.isfinite(train_loss):
                row = TraceRow(step_no, step_no * tps, cum_cost,
                               directive.label(), float(train_loss), None)
                writer.append(row)
                raise NumericError(f"non-finite loss at step {step_no}")

            store.zero_grads()
            model.backward(store, tape, ops.cross_entropy_logits_backward(xent),
                           directive.active_depth, directive.grad_depth_lo,
                           directive.train_embeddings_head)
            del tape
            optim.step(store, opt_state, cfg.optim, step_idx)

            val_loss = None
            is_last = step_no == plan.total_steps
            if val_cursor is not None and (step_no % cfg.eval_every == 0 or is_last):
                val_loss = evaluate(store, directive.active_depth, val_cursor,
                                    cfg.eval_batches)

            row = TraceRow(step_no, step_no * tps, cum_cost, directive.label(),
                           train_loss, val_loss)
            rows.append(row)
            writer.append(row)

            if step_no % cfg.checkpoint_every == 0 or is_last:
                ckpt.save_checkpoint(ckpt_path, store, opt_state, {
                    "step": step_no, "tokens": step_no * tps, "cum_cost": cum_cost,
                })

            if log and (step_no % log_every == 0 or is_last):
                dt = (time.perf_counter() - t_last) / min(log_every, step_no)
                t_last = time.perf_counter()
                val_txt = "" if val_loss is None else f" val {val_loss:.4f}"
                print(f"[{out_dir.name}] step {step_no}/{plan.total_steps} "
                      f"{directive.label()} loss {train_loss:.4f}{val_txt} "
                      f"({dt:.2f}s/step)", flush=True)

    finally:
        writer.close()
    return RunTrace(rows=rows, meta=meta)


# ---------------------------------------------------------------------------
# equal-compute comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonRow:
    label: str
    n_stages: int
    equal_step: int | None       # None: trace never reaches baseline cost
    eval_step: int | None        # step whose val loss is reported
    val_loss: float | None
    baseline_val_loss: float
    gap: float | None
    match_step: int | None       # first step with val <= baseline final val


@dataclass
class ComparisonReport:
    baseline_steps: int
    baseline_cost: Fraction
    rows: list

    def to_text(self):
        out = [
            f"baseline: {self.baseline_steps} steps, "
            f"cost {costs.format_fraction(self.baseline_cost)} block-layer-tokens"
        ]
        for r in self.rows:
            if r.equal_step is None:
                out.append(f"{r.label}: equal-compute point not reached")
                continue
            gap = "n/a" if r.gap is None else f"{r.gap:+.6f}"
            match = "never" if r.match_step is None else str(r.match_step)
            out.append(
                f"{r.label}: equal-compute step {r.equal_step} "
                f"(val {r.val_loss} at step {r.eval_step}, "
                f"baseline {r.baseline_val_loss}, gap {gap}); "
                f"first step at/below baseline val: {match}"
            )
        return "\n".join(out)

    def to_dict(self):
        return {
            "baseline_steps": self.baseline_steps,
            "baseline_cost": str(self.baseline_cost),
            "rows": [
                {
                    "label": r.label,
                    "n_stages": r.n_stages,
                    "equal_step": r.equal_step,
                    "eval_step": r.eval_step,
                    "val_loss": r.val_loss,
                    "baseline_val_loss": r.baseline_val_loss,
                    "gap": r.gap,
                    "match_step": r.match_step,
                }
                for r in self.rows
            ],
        }


def _last_val_at_or_before(trace, step):
    best = None
    for r in trace.rows:
        if r.step <= step and r.val_loss is not None:
            best = r
    return best


def equal_compute_step(trace_inc, baseline_cost, t_baseline):
    """Step index where the incremental run reaches the baseline's cost.

    When the run matches the reference setting (T_inc == T_baseline,
    backward_ratio 1, same tokens-per-step), this is the closed-form
    nearest-step index; otherwise it is the first trace row whose metered
    cumulative cost reaches baseline_cost.
    """
    meta = trace_inc.meta
    if (meta.get("regime") == "incremental"
            and meta.get("steps") == t_baseline
            and Fraction(meta.get("backward_ratio", "1")) == 1):
        params = costs.make_params(
            meta["n_layers"], meta["n_stages"],
            steps_baseline=t_baseline,
        )
        _, step = costs.continual_tokens_to_match(params)
        if trace_inc.rows and trace_inc.rows[-1].step >= step:
            return step
        return None
    for r in trace_inc.rows:
        if r.cum_cost >= baseline_cost:
            return r.step
    return None


def compare(trace_baseline, traces_incremental, t_baseline=None):
    """Equal-compute comparison against the baseline trained for T steps."""
    if t_baseline is None:
        t_baseline = trace_baseline.meta.get("steps", trace_baseline.rows[-1].step)
    base_row = trace_baseline.row_at_step(t_baseline)
    if base_row is None:
        raise DataError(f"baseline trace has no row for step {t_baseline}")
    base_val_row = _last_val_at_or_before(trace_baseline, t_baseline)
    if base_val_row is None:
        raise DataError("baseline trace has no validation losses")
    base_val = base_val_row.val_loss

    rows = []
    for trace in traces_incremental:
        s = trace.meta.get("n_stages") or _infer_stages(trace)
        if trace.meta.get("n_stages") is None:
            trace.meta["n_stages"] = s
        label = trace.meta.get("label", f"S{s}")
        eq = equal_compute_step(trace, base_row.cum_cost, t_baseline)
        eval_step = val = gap = None
        if eq is not None:
            for r in trace.rows:
                if r.step >= eq and r.val_loss is not None:
                    eval_step, val = r.step, r.val_loss
                    break
            if val is not None:
                gap = val - base_val
        match_step = None
        for r in trace.rows:
            if r.val_loss is not None and r.val_loss <= base_val:
                match_step = r.step
                break
        rows.append(ComparisonRow(
            label=label,
            n_stages=s,
            equal_step=eq,
            eval_step=eval_step,
            val_loss=val,
            baseline_val_loss=base_val,
            gap=gap,
            match_step=match_step,
        ))
    return ComparisonReport(
        baseline_steps=t_baseline,
        baseline_cost=base_row.cum_cost,
        rows=rows,
    )


def _infer_stages(trace):
    """Recover S from phase labels when meta is absent."""
    s = 0
    for r in trace.rows:
        if r.mode.startswith(("phase1_s", "phase2_s")):
            s = max(s, int(r.mode.rsplit("_s", 1)[1]))
    return s or 1


def verify_trace_costs(trace, cfg=None):
    """Recompute the meter over the trace's directive sequence and check
    every row's cumulative cost matches exactly. Returns True or raises."""
    meta = trace.meta
    tps = meta["tokens_per_step"]
    rho = Fraction(meta.get("backward_ratio", "1"))
    if meta["regime"] == "baseline":
        plan = schedule.baseline_plan(meta["n_layers"], meta["steps"])
    else:
        plan = schedule.build_plan(meta["n_layers"], meta["n_stages"],
                                   meta["steps"], meta["steps_continual"])
    cum = Fraction(0)
    for i, row in enumerate(trace.rows):
        d = plan.directive_at(i)
        cum += tps * costs.step_cost_per_token(
            d.active_depth, d.grad_depth_lo, backward_ratio=rho)
        if cum != row.cum_cost:
            raise DataError(
                f"trace cost mismatch at step {row.step}: "
                f"recomputed {cum}, recorded {row.cum_cost}"
            )
        if d.label() != row.mode:
            raise DataError(
                f"trace mode mismatch at step {row.step}: "
                f"{d.label()} vs {row.mode}"
            )
    return True
