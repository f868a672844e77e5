"""Exact computational cost accounting in layer-token units.

One unit c is the cost of one block layer processing one token in one
pass; backward passes are weighted by a configurable ratio rho (default 1,
the equal-cost assumption behind the closed forms). Embedding and head
work is excluded: the unit of account is block-layer-tokens.

Everything is Fraction arithmetic, so the closed forms, the brute-force
stage summation, and the runtime meter can be compared for exact equality
rather than within a tolerance.
"""

from dataclasses import dataclass
from fractions import Fraction

from incgpt.errors import AssumptionError, ConfigError


@dataclass(frozen=True)
class CostParams:
    n_layers: int
    n_stages: int
    steps_baseline: Fraction = Fraction(0)
    steps_incremental: Fraction = Fraction(0)
    unit_cost: Fraction = Fraction(1)
    backward_ratio: Fraction = Fraction(1)

    def __post_init__(self):
        if self.n_layers < 1 or self.n_stages < 1:
            raise ConfigError("n_layers and n_stages must be positive")
        if self.backward_ratio <= 0 or self.unit_cost <= 0:
            raise ConfigError("unit_cost and backward_ratio must be positive")

    @property
    def layers_per_stage(self):
        # the cost algebra is valid for fractional m = L/S (the reference
        # equal-compute step for 12 layers in 8 stages requires it); only the
        # executable schedule demands whole layers per stage
        return Fraction(self.n_layers, self.n_stages)


def make_params(n_layers, n_stages, steps_baseline=0, steps_incremental=None,
                unit_cost=1, backward_ratio=1):
    """CostParams with Fraction coercion; T_inc defaults to T."""
    if steps_incremental is None:
        steps_incremental = steps_baseline
    return CostParams(
        n_layers=n_layers,
        n_stages=n_stages,
        steps_baseline=Fraction(steps_baseline),
        steps_incremental=Fraction(steps_incremental),
        unit_cost=Fraction(unit_cost),
        backward_ratio=Fraction(backward_ratio),
    )


def step_cost_per_token(active_depth, grad_depth_lo, unit_cost=Fraction(1),
                        backward_ratio=Fraction(1)):
    """Per-token cost of one step: forward through active_depth layers,
    backward through active_depth - grad_depth_lo + 1 of them."""
    bwd_layers = active_depth - grad_depth_lo + 1
    return Fraction(unit_cost) * (active_depth + Fraction(backward_ratio) * bwd_layers)


def baseline_cost(params, tokens=None):
    """T * L * c * (1 + rho); the familiar 2TLc when rho = 1."""
    t = params.steps_baseline if tokens is None else Fraction(tokens)
    return t * params.n_layers * params.unit_cost * (1 + params.backward_ratio)


def incremental_cost_closed_form(params):
    """T_inc * c * L * (3S + 5) / (4S), valid only under rho = 1."""
    if params.backward_ratio != 1:
        raise AssumptionError(
            "closed form assumes backward_ratio == 1; use "
            "incremental_cost_brute_force for other ratios"
        )
    return (params.steps_incremental * params.unit_cost * params.n_layers
            * (3 * params.n_stages + 5)) / (4 * params.n_stages)


def incremental_cost_brute_force(params):
    """Explicit per-stage, per-phase summation (any rho).

    Each phase processes exactly T_inc/(2S) tokens; Phase 1 runs forward
    through i*m layers and backward through the m new ones, Phase 2 both
    ways through i*m.
    """
    per_phase = params.steps_incremental / (2 * params.n_stages)
    m = params.layers_per_stage
    c, rho = params.unit_cost, params.backward_ratio
    total = Fraction(0)
    for i in range(1, params.n_stages + 1):
        depth = i * m
        total += per_phase * c * (depth + rho * m)       # phase 1
        total += per_phase * c * (depth + rho * depth)   # phase 2
    return total


def continual_tokens_to_match(params):
    """Continual tokens needed for the incremental run to reach the
    baseline's total cost, plus the whole-step index where that happens.

    Solves C_incremental + T_cont * L * c * (1 + rho) = C_baseline exactly.
    With rho = 1 and T_inc = T this is the (5/8)(1 - 1/S) * T form, zero at
    S = 1. The reported step index is T_inc + T_cont rounded to the nearest
    whole step (half up); for L=12, T=10000 that gives 14688/15469/15729
    at S=4/8/12.
    """
    c_inc = incremental_cost_brute_force(params)
    per_token = params.n_layers * params.unit_cost * (1 + params.backward_ratio)
    t_cont = (baseline_cost(params) - c_inc) / per_token
    equal_step = round_half_up(params.steps_incremental + t_cont)
    return t_cont, equal_step


def round_half_up(x):
    """Nearest integer, ties away from zero for positive x."""
    return int(Fraction(x) + Fraction(1, 2)) if Fraction(x) >= 0 else -round_half_up(-x)


class CostLedger:
    """Runtime meter: accumulates exact cost as directives execute."""

    def __init__(self, unit_cost=Fraction(1), backward_ratio=Fraction(1)):
        self.unit_cost = Fraction(unit_cost)
        self.backward_ratio = Fraction(backward_ratio)
        self.rows = []  # (label, tokens, cost)
        self.cumulative = Fraction(0)

    def record(self, directive, tokens):
        """Meter one executed segment; returns the new cumulative cost."""
        cost = Fraction(tokens) * step_cost_per_token(
            directive.active_depth, directive.grad_depth_lo,
            self.unit_cost, self.backward_ratio,
        )
        self.rows.append((directive.label(), Fraction(tokens), cost))
        self.cumulative += cost
        return self.cumulative

    def total(self):
        return self.cumulative

    def by_label(self):
        """Aggregated (tokens, cost) per directive label, insertion order."""
        agg = {}
        for label, tokens, cost in self.rows:
            t, c = agg.get(label, (Fraction(0), Fraction(0)))
            agg[label] = (t + tokens, c + cost)
        return agg


def meter_exact_schedule(params, segments):
    """Run the meter over exact (directive, tokens) segments; returns total."""
    ledger = CostLedger(params.unit_cost, params.backward_ratio)
    for directive, tokens in segments:
        ledger.record(directive, tokens)
    return ledger.total()


def per_stage_report(params):
    """Cost breakdown rows: (stage, phase, tokens, cost, cumulative).

    Straight from the formulas (works for fractional layers-per-stage too);
    the row total equals incremental_cost_brute_force by construction.
    """
    per_phase = params.steps_incremental / (2 * params.n_stages)
    m = params.layers_per_stage
    c, rho = params.unit_cost, params.backward_ratio
    rows = []
    cum = Fraction(0)
    for i in range(1, params.n_stages + 1):
        depth = i * m
        for phase, bwd in ((1, m), (2, depth)):
            cost = per_phase * c * (depth + rho * bwd)
            cum += cost
            rows.append((i, phase, per_phase, cost, cum))
    return rows


def report_text(params):
    """Human-readable per-stage/phase table plus the headline quantities."""
    rows = per_stage_report(params)
    f = format_fraction
    out = [f"{'stage':>5} {'phase':>5} {'tokens':>12} {'cost':>14} {'cumulative':>14}"]
    for stage, phase, tokens, cost, cum in rows:
        out.append(f"{stage:>5} {phase:>5} {f(tokens):>12} {f(cost):>14} {f(cum):>14}")
    return "\n".join(out)


def report_csv(params, path):
    """Write the per-stage/phase breakdown as CSV."""
    import csv as _csv

    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["stage", "phase", "tokens", "cost", "cum_cost"])
        for stage, phase, tokens, cost, cum in per_stage_report(params):
            w.writerow([stage, phase, tokens, cost, cum])


def format_fraction(x):
    """Exact human-friendly rendering: integer, finite decimal, or p/q."""
    x = Fraction(x)
    if x.denominator == 1:
        return str(x.numerator)
    # finite decimal expansions only for 2^a * 5^b denominators
    den = x.denominator
    for p in (2, 5):
        while den % p == 0:
            den //= p
    if den == 1:
        return str(float(x)) if abs(x) < 1e15 else str(x)
    return f"{x.numerator}/{x.denominator}"
