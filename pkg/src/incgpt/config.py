"""Run configuration: a small TOML-subset reader/writer and the TrainConfig
assembly used by the CLI.

The subset (documented in the README schema): `[section]` headers, `key =
value` pairs with double-quoted strings, integers, floats, booleans, and
flat arrays of those. Comments start with `#`. This covers the whole config
schema; the reader exists because the deployment floor is Python 3.10
(no stdlib tomllib).
"""

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from incgpt.data import BatchSpec, VOCAB_SIZE
from incgpt.errors import ConfigError
from incgpt.model import ModelConfig
from incgpt.optim import AdamWConfig


def _parse_scalar(text, where):
    t = text.strip()
    if not t:
        raise ConfigError(f"{where}: empty value")
    if t.startswith('"'):
        if not t.endswith('"') or len(t) < 2:
            raise ConfigError(f"{where}: unterminated string {t!r}")
        return t[1:-1].replace('\\"', '"').replace("\\\\", "\\")
    if t in ("true", "false"):
        return t == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {t!r}") from None


def _split_array_items(body, where):
    items, depth, cur, in_str = [], 0, "", False
    for ch in body:
        if ch == '"' and not cur.endswith("\\"):
            in_str = not in_str
        if ch == "," and not in_str:
            items.append(cur)
            cur = ""
        else:
            cur += ch
    if cur.strip():
        items.append(cur)
    return [s for s in items if s.strip()]


def parse_toml(text, where="<config>"):
    """Parse the TOML subset into {section: {key: value}}."""
    root = {}
    section = root
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        loc = f"{where}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{loc}: malformed section header {line!r}")
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"{loc}: empty section name")
            section = root.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{loc}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if value.startswith('"'):
            end = value.find('"', 1)
            while end > 0 and value[end - 1] == "\\":
                end = value.find('"', end + 1)
            if end < 0:
                raise ConfigError(f"{loc}: unterminated string")
            value = value[:end + 1]
        else:
            value = value.split("#", 1)[0].strip()
        if value.startswith("[") and value.endswith("]"):
            section[key] = [
                _parse_scalar(item, loc) for item in _split_array_items(value[1:-1], loc)
            ]
        else:
            section[key] = _parse_scalar(value, loc)
    return root


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def write_toml(sections):
    """Render {section: {key: value}} in the same subset."""
    lines = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        for key, value in body.items():
            lines.append(f"{key} = {_fmt_value(value)}")
        lines.append("")
    return "\n".join(lines)


@dataclass
class TrainConfig:
    """Everything one training run needs."""

    model: ModelConfig
    optim: AdamWConfig
    batch: BatchSpec
    regime: str                    # "baseline" | "incremental"
    steps: int                     # baseline length, or incremental budget T_inc
    n_stages: int = 1
    steps_continual: int = 0       # extra continual steps after T_inc
    phase_split: Fraction = Fraction(1, 2)
    seed: int = 0
    eval_every: int = 100
    eval_batches: int = 8
    checkpoint_every: int = 500
    backward_ratio: Fraction = Fraction(1)
    data_dir: Path = Path("corpus")
    out_dir: Path = Path("run")

    def __post_init__(self):
        if self.regime not in ("baseline", "incremental"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.steps <= 0:
            raise ConfigError("steps must be > 0")
        if self.eval_every < 1 or self.eval_batches < 0 or self.checkpoint_every < 1:
            raise ConfigError("eval/checkpoint cadence must be positive")

    @property
    def total_steps(self):
        if self.regime == "baseline":
            return self.steps
        return self.steps + self.steps_continual


def _take(section, key, default=None, required=False):
    if key in section:
        return section[key]
    if required:
        raise ConfigError(f"missing required config key {key!r}")
    return default


def train_config_from_dict(doc):
    """Build a TrainConfig from parsed config sections."""
    msec = doc.get("model", {})
    osec = doc.get("optim", {})
    bsec = doc.get("batch", {})
    rsec = doc.get("regime", {})
    run = doc.get("run", {})

    model = ModelConfig(
        n_layers=_take(msec, "n_layers", required=True),
        d_model=_take(msec, "d_model", required=True),
        n_heads=_take(msec, "n_heads", required=True),
        context_len=_take(msec, "context_len", required=True),
        vocab_size=_take(msec, "vocab_size", VOCAB_SIZE),
        precision=_take(msec, "precision", "fast32"),
        init_seed=_take(msec, "init_seed", _take(run, "seed", 0)),
    )
    clip = _take(osec, "grad_clip_norm", 1.0)
    optim = AdamWConfig(
        lr=_take(osec, "lr", 6e-4),
        beta1=_take(osec, "beta1", 0.9),
        beta2=_take(osec, "beta2", 0.95),
        eps=_take(osec, "eps", 1e-8),
        weight_decay=_take(osec, "weight_decay", 0.1),
        warmup_steps=_take(osec, "warmup_steps", 0),
        grad_clip_norm=clip if clip else None,  # 0 disables clipping
    )
    batch = BatchSpec(
        batch_size=_take(bsec, "batch_size", required=True),
        seq_len=_take(bsec, "seq_len", required=True),
    )
    kind = _take(rsec, "kind", "baseline")
    return TrainConfig(
        model=model,
        optim=optim,
        batch=batch,
        regime=kind,
        steps=_take(rsec, "steps", required=True),
        n_stages=_take(rsec, "stages", 1),
        steps_continual=_take(rsec, "steps_continual", 0),
        phase_split=Fraction(str(_take(rsec, "phase_split", "1/2"))),
        seed=_take(run, "seed", 0),
        eval_every=_take(run, "eval_every", 100),
        eval_batches=_take(run, "eval_batches", 8),
        checkpoint_every=_take(run, "checkpoint_every", 500),
        backward_ratio=Fraction(str(_take(run, "backward_ratio", "1"))),
        data_dir=Path(_take(run, "data_dir", "corpus")),
        out_dir=Path(_take(run, "out_dir", "run")),
    )


def load_train_config(path, overrides=None):
    """Parse a config file and apply CLI overrides (seed/precision/out/data)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    doc = parse_toml(path.read_text(), where=str(path))
    overrides = overrides or {}
    if "seed" in overrides:
        doc.setdefault("run", {})["seed"] = overrides["seed"]
        doc.setdefault("model", {})["init_seed"] = overrides["seed"]
    if "precision" in overrides:
        doc.setdefault("model", {})["precision"] = overrides["precision"]
    if "out_dir" in overrides:
        doc.setdefault("run", {})["out_dir"] = str(overrides["out_dir"])
    if "data_dir" in overrides:
        doc.setdefault("run", {})["data_dir"] = str(overrides["data_dir"])
    return train_config_from_dict(doc)


def echo_train_config(cfg):
    """Render a TrainConfig back to config-file text, for run metadata."""
    return write_toml({
        "model": {
            "n_layers": cfg.model.n_layers,
            "d_model": cfg.model.d_model,
            "n_heads": cfg.model.n_heads,
            "context_len": cfg.model.context_len,
            "vocab_size": cfg.model.vocab_size,
            "precision": cfg.model.precision,
            "init_seed": cfg.model.init_seed,
        },
        "optim": {
            "lr": cfg.optim.lr,
            "beta1": cfg.optim.beta1,
            "beta2": cfg.optim.beta2,
            "eps": cfg.optim.eps,
            "weight_decay": cfg.optim.weight_decay,
            "warmup_steps": cfg.optim.warmup_steps,
            "grad_clip_norm": cfg.optim.grad_clip_norm or 0.0,
        },
        "batch": {
            "batch_size": cfg.batch.batch_size,
            "seq_len": cfg.batch.seq_len,
        },
        "regime": {
            "kind": cfg.regime,
            "steps": cfg.steps,
            "stages": cfg.n_stages,
            "steps_continual": cfg.steps_continual,
            "phase_split": str(cfg.phase_split),
        },
        "run": {
            "seed": cfg.seed,
            "eval_every": cfg.eval_every,
            "eval_batches": cfg.eval_batches,
            "checkpoint_every": cfg.checkpoint_every,
            "backward_ratio": str(cfg.backward_ratio),
            "data_dir": str(cfg.data_dir),
            "out_dir": str(cfg.out_dir),
        },
    })
