"""Training-regime state machine.

Splits L layers into S stages of m layers. Each stage runs Phase 1 (only
the newly added layers receive gradients; embeddings/head frozen except in
stage 1, where nothing earlier exists) then Phase 2 (all layers up to the
current stage). After the incremental budget, the continual phase trains
all L layers jointly, mechanically identical to baseline training.

Budgets are in steps (batches). Stage boundaries land on whole steps; each
stage's Phase 1 gets the floor of the split, Phase 2 the remainder, so
stage totals are exact. The exact fractional accounting used by the cost
formulas lives in `exact_phase_segments`.
"""

from dataclasses import dataclass
from fractions import Fraction

from incgpt.errors import ConfigError


@dataclass(frozen=True)
class StepDirective:
    mode: str                    # "phase1" | "phase2" | "continual" | "baseline"
    stage: int | None            # 1-based stage for phase1/phase2, else None
    active_depth: int
    grad_depth_lo: int
    train_embeddings_head: bool

    def label(self):
        if self.stage is not None:
            return f"{self.mode}_s{self.stage}"
        return self.mode

    def signature(self):
        """The fields that determine what a training step computes."""
        return (self.active_depth, self.grad_depth_lo, self.train_embeddings_head)


@dataclass(frozen=True)
class StagePlan:
    n_layers: int
    n_stages: int
    layers_per_stage: int
    steps_incremental: int
    steps_continual: int
    phase_split: Fraction
    # per stage: (start, phase2_start, end) in absolute step indices
    boundaries: tuple

    @property
    def total_steps(self):
        return self.steps_incremental + self.steps_continual

    def directive_at(self, steps_done):
        """Directive for the step at 0-based position steps_done."""
        if steps_done < 0:
            raise ValueError("steps_done must be >= 0")
        m = self.layers_per_stage
        if steps_done >= self.steps_incremental:
            return StepDirective("continual", None, self.n_layers, 1, True)
        for i, (start, p2_start, end) in enumerate(self.boundaries, start=1):
            if steps_done < end:
                depth = i * m
                if steps_done < p2_start:
                    # stage 1 has nothing below it to ground the loss, so
                    # embeddings/head train there even in Phase 1
                    return StepDirective("phase1", i, depth, (i - 1) * m + 1,
                                         i == 1)
                return StepDirective("phase2", i, depth, 1, True)
        raise AssertionError("unreachable: boundaries cover [0, steps_incremental)")


@dataclass(frozen=True)
class BaselinePlan:
    n_layers: int
    steps: int

    @property
    def total_steps(self):
        return self.steps

    def directive_at(self, steps_done):
        if steps_done < 0:
            raise ValueError("steps_done must be >= 0")
        return StepDirective("baseline", None, self.n_layers, 1, True)


def build_plan(n_layers, n_stages, steps_incremental, steps_continual=0,
               phase_split=Fraction(1, 2)):
    """Construct the incremental-stage plan.

    Stage i covers steps [floor((i-1)*T/S), floor(i*T/S)); Phase 1 takes
    floor(split * stage_len) of them, Phase 2 the rest.
    """
    if n_layers < 1 or n_stages < 1:
        raise ConfigError("n_layers and n_stages must be positive")
    if n_layers % n_stages != 0:
        raise ConfigError(
            f"n_layers {n_layers} not divisible by n_stages {n_stages}"
        )
    if steps_incremental <= 0:
        raise ConfigError("steps_incremental must be > 0")
    if steps_continual < 0:
        raise ConfigError("steps_continual must be >= 0")
    split = Fraction(phase_split)
    if not 0 < split < 1:
        raise ConfigError(f"phase_split must lie in (0, 1), got {split}")

    bounds = []
    for i in range(1, n_stages + 1):
        start = (i - 1) * steps_incremental // n_stages
        end = i * steps_incremental // n_stages
        p1_len = int(split * (end - start))  # Fraction floors under int()
        bounds.append((start, start + p1_len, end))
    return StagePlan(
        n_layers=n_layers,
        n_stages=n_stages,
        layers_per_stage=n_layers // n_stages,
        steps_incremental=steps_incremental,
        steps_continual=steps_continual,
        phase_split=split,
        boundaries=tuple(bounds),
    )


def baseline_plan(n_layers, steps):
    """Full-depth, full-backward plan for `steps` steps."""
    if steps <= 0:
        raise ConfigError("baseline steps must be > 0")
    return BaselinePlan(n_layers=n_layers, steps=steps)


def exact_phase_segments(n_layers, n_stages, tokens_incremental,
                         phase_split=Fraction(1, 2)):
    """The idealized schedule as (directive, exact token count) segments.

    Token counts are Fractions (each phase gets exactly split*T/S tokens
    regardless of batch granularity); this is the form the cost formulas
    integrate over.
    """
    if n_layers % n_stages != 0:
        raise ConfigError(
            f"n_layers {n_layers} not divisible by n_stages {n_stages}"
        )
    m = n_layers // n_stages
    split = Fraction(phase_split)
    per_stage = Fraction(tokens_incremental, n_stages)
    segments = []
    for i in range(1, n_stages + 1):
        depth = i * m
        p1 = StepDirective("phase1", i, depth, (i - 1) * m + 1, i == 1)
        p2 = StepDirective("phase2", i, depth, 1, True)
        segments.append((p1, per_stage * split))
        segments.append((p2, per_stage * (1 - split)))
    return segments
