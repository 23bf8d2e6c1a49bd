"""Experiment orchestration: learning-rate sweeps over (variant, task, m) cells.

A *cell* is one (task, m, variant, seed) combination.  Running a cell
trains one model per learning rate, selects the best run by held-out
validation accuracy (loss as tiebreak), and evaluates accuracy on the
in-distribution length band and at one out-of-distribution length.
Results are flat rows with a stable CSV schema; a markdown pivot mirrors
the (validation | OOD) x m layout used for reporting.

Failed (overflowed) runs are kept as rows with status != "ok" and are
never eligible for best-run selection.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tasks, training
from .linalg import make_rng
from .models import ADDITIVE_SETTINGS, AdditiveConfig, Model
from .training import TrainConfig


@dataclass(frozen=True)
class Profile:
    """Scale preset: desk runs fit on a laptop CPU, paper mirrors the source setup."""

    name: str
    H: int
    D: int
    steps: int
    ood_length: int
    n_eval: int
    init_half_width: float


# The desk profile widens the initialization to 0.1: at H=32 the paper-scale
# 0.01 init leaves the recurrence so contractive that gradients sit below
# Adam's epsilon and nothing trains within a desk-scale step budget.  The
# paper profile keeps the published 0.01 value.  h0 stays at 0.01 in both
# (for multiplicative models its scale is immaterial by scale invariance).
PROFILES = {
    "desk": Profile("desk", H=32, D=32, steps=20_000, ood_length=100, n_eval=2048,
                    init_half_width=0.1),
    "paper": Profile("paper", H=256, D=256, steps=100_000, ood_length=500, n_eval=2048,
                     init_half_width=0.01),
}

BAND_LABEL = "2-10"  # in-distribution evaluation band (training lengths)


@dataclass
class RunConfig:
    task: str
    variant: str
    m_values: tuple
    H: int = 32
    D: int = 32
    rank: int | None = None
    block_size: int | None = None
    additive: AdditiveConfig = field(default_factory=AdditiveConfig.none)
    train: TrainConfig = field(default_factory=TrainConfig)
    ood_length: int = 100
    n_eval: int = 2048
    seeds: tuple = (0,)
    init_half_width: float = 0.1
    h0_half_width: float = 0.01

    @classmethod
    def from_profile(cls, profile, task, variant, m_values, **overrides):
        p = PROFILES[profile] if isinstance(profile, str) else profile
        cfg = cls(
            task=task,
            variant=variant,
            m_values=tuple(m_values),
            H=p.H,
            D=p.D,
            train=TrainConfig(steps=p.steps),
            ood_length=p.ood_length,
            n_eval=p.n_eval,
            init_half_width=p.init_half_width,
        )
        for k, v in overrides.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown RunConfig field {k!r}")
            setattr(cfg, k, v)
        return cfg


@dataclass
class ResultRow:
    task: str
    model: str
    variant_params: str
    m: int
    length: str  # exact length, or the band label "2-10"
    lr: float
    seed: int
    raw_acc: float
    norm_acc: float
    status: str
    wall_s: float
    chosen: bool


CSV_COLUMNS = (
    "task", "model", "variant_params", "m", "length", "lr", "seed",
    "raw_acc", "norm_acc", "status", "wall_s", "chosen",
)


def _variant_params_label(cfg):
    parts = [f"H={cfg.H}", f"D={cfg.D}"]
    if cfg.variant == "factored":
        parts.append(f"R={cfg.rank}")
    if cfg.variant == "block_diag":
        parts.append(f"bs={cfg.block_size}")
    if cfg.additive.label != "none":
        parts.append(f"add={cfg.additive.label}")
    return ",".join(parts)


def _build_model(cfg, spec, rng):
    vocab = tasks.vocab_for(spec)
    model = Model.build(
        cfg.variant,
        cfg.H,
        cfg.D,
        len(vocab),
        spec.m,
        rng,
        rank=cfg.rank,
        block_size=cfg.block_size,
        additive=cfg.additive,
        init_half_width=cfg.init_half_width,
    )
    # spec'd h0 init width is independent of the profile's weight init width
    model.params["h0"] = rng.uniform(-cfg.h0_half_width, cfg.h0_half_width, size=cfg.H)
    return model


def make_task_spec(cfg, m, seed):
    """Task spec for one cell; the automaton is fixed by (m, seed)."""
    if cfg.task == tasks.STATE_MACHINE:
        fsm_rng = make_rng(np.random.SeedSequence([77, m, seed]))
        return tasks.TaskSpec(cfg.task, m, max_len=cfg.train.max_len, fsm=tasks.gen_fsm(m, fsm_rng))
    return tasks.TaskSpec(cfg.task, m, max_len=cfg.train.max_len)


def run_cell(cfg, m, seed, return_models=False):
    """Train the 3-lr sweep for one cell; returns result rows (and models)."""
    spec = make_task_spec(cfg, m, seed)
    label = _variant_params_label(cfg)
    root = np.random.SeedSequence([101, m, seed])
    lr_seeds = root.spawn(len(cfg.train.learning_rates))
    eval_seed = root.spawn(1)[0]

    runs = []
    for lr, ss in zip(cfg.train.learning_rates, lr_seeds):
        init_ss, train_ss = ss.spawn(2)
        model = _build_model(cfg, spec, make_rng(init_ss))
        tcfg = replace(cfg.train, seed=train_ss)
        t0 = time.perf_counter()
        try:
            model, hist = training.train(model, spec, tcfg, lr=lr)
            status = "ok"
            val_acc, val_loss = hist.final_val_acc, hist.final_val_loss
        except training.TrainingOverflow:
            status = "overflow"
            val_acc, val_loss = 0.0, float("inf")
        wall = time.perf_counter() - t0
        runs.append({"lr": lr, "model": model, "status": status,
                     "val_acc": val_acc, "val_loss": val_loss, "wall": wall})

    ok = [r for r in runs if r["status"] == "ok"]
    chosen = max(ok, key=lambda r: (r["val_acc"], -r["val_loss"])) if ok else None

    rows = []
    for i, r in enumerate(runs):
        is_chosen = r is chosen
        if r["status"] != "ok":
            rows.append(ResultRow(cfg.task, cfg.variant, label, m, BAND_LABEL, r["lr"],
                                  seed, 0.0, 0.0, r["status"], r["wall"], False))
            continue
        band_rng, ood_rng = np.random.SeedSequence([202, m, seed, i]).spawn(2)
        band = training.evaluate_band(r["model"], spec, cfg.n_eval, band_rng)
        rows.append(ResultRow(cfg.task, cfg.variant, label, m, BAND_LABEL, r["lr"], seed,
                              band.raw_acc, band.norm_acc, "ok", r["wall"], is_chosen))
        if is_chosen:
            ood = training.evaluate(r["model"], spec, cfg.ood_length, cfg.n_eval, ood_rng)
            rows.append(ResultRow(cfg.task, cfg.variant, label, m, str(cfg.ood_length),
                                  r["lr"], seed, ood.raw_acc, ood.norm_acc, "ok",
                                  r["wall"], True))
    if return_models:
        return rows, runs, chosen
    return rows


def sweep(cfg, progress=None):
    """Run all (m, seed) cells of a config; returns the combined rows."""
    rows = []
    for m in cfg.m_values:
        for seed in cfg.seeds:
            if progress:
                progress(f"cell task={cfg.task} variant={cfg.variant} m={m} seed={seed}")
            rows.extend(run_cell(cfg, m, seed))
    return rows


def ablate_additive(cfg, progress=None):
    """Additive-term ablation: 4 settings x m grid on one variant/task.

    Returns (rows, grid) where grid maps (setting_label, m) to the chosen
    run's OOD normalized accuracy.
    """
    rows = []
    grid = {}
    for label, add in ADDITIVE_SETTINGS.items():
        acfg = replace(cfg, additive=add)
        for m in cfg.m_values:
            for seed in cfg.seeds:
                if progress:
                    progress(f"ablate additive={label} m={m} seed={seed}")
                cell = run_cell(acfg, m, seed)
                rows.extend(cell)
                ood = [r for r in cell if r.chosen and r.length == str(cfg.ood_length)]
                grid[(label, m)] = ood[0].norm_acc if ood else float("nan")
    return rows, grid


def factor_sweep(cfg, ranks, progress=None):
    """Factored-variant sweep over the rank grid; returns (rows, grid)."""
    rows = []
    grid = {}
    for R in ranks:
        rcfg = replace(cfg, variant="factored", rank=R)
        for m in cfg.m_values:
            for seed in cfg.seeds:
                if progress:
                    progress(f"factor R={R} m={m} seed={seed}")
                cell = run_cell(rcfg, m, seed)
                rows.extend(cell)
                ood = [r for r in cell if r.chosen and r.length == str(cfg.ood_length)]
                grid[(R, m)] = ood[0].norm_acc if ood else float("nan")
    return rows, grid


# ---------------------------------------------------------------------------
# Result emission
# ---------------------------------------------------------------------------


def emit_csv(rows, path=None, deterministic=False):
    """Rows in the stable column order; returns the text, writes if path given.

    ``deterministic`` zeroes the wall-time column so that repeated runs
    with the same seeds produce byte-identical files.
    """
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for r in rows:
        wall = 0.0 if deterministic else r.wall_s
        buf.write(
            f"{r.task},{r.model},\"{r.variant_params}\",{r.m},{r.length},"
            f"{r.lr:.10g},{r.seed},{r.raw_acc:.10g},{r.norm_acc:.10g},"
            f"{r.status},{wall:.6g},{int(r.chosen)}\n"
        )
    text = buf.getvalue()
    if path:
        with open(path, "w") as f:
            f.write(text)
    return text


def parse_csv(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if lines[0] != ",".join(CSV_COLUMNS):
        raise ValueError("unexpected CSV header")
    rows = []
    for ln in lines[1:]:
        # variant_params is the only quoted field (it contains commas)
        pre, rest = ln.split(',"', 1)
        vp, post = rest.split('",', 1)
        task, model = pre.split(",")
        m, length, lr, seed, raw, norm, status, wall, chosen = post.split(",")
        rows.append(ResultRow(task, model, vp, int(m), length, float(lr), int(seed),
                              float(raw), float(norm), status, float(wall),
                              bool(int(chosen))))
    return rows


def merge_rows(*row_lists):
    """Concatenate result sets, enforcing one chosen lr per (cell, length)."""
    merged = []
    seen = {}
    for rows in row_lists:
        for r in rows:
            key = (r.task, r.model, r.variant_params, r.m, r.length, r.seed)
            if r.chosen:
                if seen.get(key):
                    raise ValueError(f"duplicate chosen-lr rows for cell {key}")
                seen[key] = True
            merged.append(r)
    return merged


def emit_markdown_table(rows, ood_length):
    """Pivot chosen rows into a (validation | OOD) x m accuracy table."""
    chosen = [r for r in rows if r.chosen]
    ms = sorted({r.m for r in chosen})
    variants = sorted({(r.task, r.model, r.variant_params) for r in chosen})
    header = (
        ["task", "model (params)"]
        + [f"val m={m}" for m in ms]
        + [f"ood@{ood_length} m={m}" for m in ms]
    )
    lines = ["| " + " | ".join(header) + " |",
             "|" + "---|" * len(header)]
    for task, model, vp in variants:
        cells = []
        for length in (BAND_LABEL, str(ood_length)):
            for m in ms:
                match = [r for r in chosen
                         if (r.task, r.model, r.variant_params, r.m, r.length)
                         == (task, model, vp, m, length)]
                cells.append(f"{match[0].norm_acc:.2f}" if match else "-")
        lines.append(f"| {task} | {model} ({vp}) | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Flat key=value config files
# ---------------------------------------------------------------------------

CONFIG_KEYS = {
    "task": str,
    "variant": str,
    "m": lambda s: tuple(int(v) for v in s.split(",")),
    "H": int,
    "D": int,
    "rank": int,
    "block_size": int,
    "additive": str,            # one of the ADDITIVE_SETTINGS labels
    "additive_half_width": float,
    "steps": int,
    "batch": int,
    "lrs": lambda s: tuple(float(v) for v in s.split(",")),
    "early_stop_loss": float,
    "max_len": int,
    "seeds": lambda s: tuple(int(v) for v in s.split(",")),
    "ood_length": int,
    "n_eval": int,
    "init_half_width": float,
    "ranks": lambda s: tuple(int(v) for v in s.split(",")),
}


def parse_config(text):
    """Parse `key = value` lines; '#' starts a comment."""
    out = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {i}: expected 'key = value', got {line!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"config line {i}: unknown key {key!r}")
        out[key] = CONFIG_KEYS[key](val)
    return out


def config_to_run(cfgdict, profile="desk"):
    """Materialize a RunConfig from a parsed config file plus profile defaults."""
    p = PROFILES[profile]
    add_label = cfgdict.get("additive", "none")
    additive = ADDITIVE_SETTINGS[add_label]
    if "additive_half_width" in cfgdict:
        additive = replace(additive, init_half_width=cfgdict["additive_half_width"])
    train = TrainConfig(
        learning_rates=cfgdict.get("lrs", (1e-3, 1e-4, 1e-5)),
        steps=cfgdict.get("steps", p.steps),
        batch_size=cfgdict.get("batch", 64),
        early_stop_loss=cfgdict.get("early_stop_loss", 1e-5),
        max_len=cfgdict.get("max_len", 10),
    )
    return RunConfig(
        task=cfgdict["task"],
        variant=cfgdict.get("variant", "full_bilinear"),
        m_values=cfgdict.get("m", (2,)),
        H=cfgdict.get("H", p.H),
        D=cfgdict.get("D", p.D),
        rank=cfgdict.get("rank"),
        block_size=cfgdict.get("block_size"),
        additive=additive,
        train=train,
        ood_length=cfgdict.get("ood_length", p.ood_length),
        n_eval=cfgdict.get("n_eval", p.n_eval),
        seeds=cfgdict.get("seeds", (0,)),
        init_half_width=cfgdict.get("init_half_width", p.init_half_width),
    )
