"""Experiment configuration, grid execution and report files.

A *unit* is one (bias, perc, seed) combination: it builds the datasets,
pretrains once and then runs every requested method from that same
pretrained model. A *cell* is one (method, perc, bias, seed) result. All
randomness inside a unit is derived from ``(seed, bias index, perc index)``,
never from execution order, so serial and parallel grids agree exactly.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import (
    AttributeSpec,
    DatasetPair,
    FamilyKind,
    SyntheticFamily,
    build_dataset_pair,
    gaussian_mixture_2d,
    generate_base,
    largest_remainder,
    load_dataset,
    procedural_image_8x8,
    save_dataset,
    strip_labels,
    union,
)
from .gan import FreezeMask, GanState, LossConfig, Stage
from .metrics import (
    AttrClassifier,
    ClassifierConfig,
    Evaluator,
    MetricsReport,
    balanced_reference_stats,
    bayes_oracle,
    train_attr_classifier,
)
from .numerics import Rng, derive_seed
from .pipeline import (
    ArchSpec,
    Gallery,
    LayerChangeStudy,
    StageConfig,
    adapt_fairtl,
    adapt_fairtlpp,
    config_hash,
    layer_change_study,
    pretrain,
)

log = logging.getLogger(__name__)

METHODS = ("pretrained", "fairTL", "fairTL++")
CSV_HEADER = ["method", "perc", "bias_id", "seeds", "fd_mean", "fd_std", "frechet_mean", "frechet_std", "runtime_s"]

# sub-stream keys within a unit
_K_DATA, _K_REF, _K_CLF, _K_PRE, _K_ADAPT, _K_EVAL = range(6)


@dataclass(frozen=True)
class RunConfig:
    family: str = FamilyKind.GAUSSIAN_MIXTURE_2D.value
    attributes: tuple[tuple[str, int], ...] = (("attr", 2),)
    bias: tuple[float, ...] = (0.9, 0.1)
    size_bias: int = 4000
    perc: float = 0.025
    holdout_per_class: int = 1000
    mixture_radius: float = 2.0
    latent_dim: int = 8
    g_hidden: tuple[int, ...] = (32, 64)
    d_hidden: tuple[int, ...] = ()  # empty: mirror the generator
    pretrain_epochs: int = 200
    adapt_epochs: int = 100
    adapt_min_steps: int = 2000
    lp_fraction: float = 0.2
    lp_epochs: int = -1  # -1: lp_fraction of the adaptation epochs
    frozen_layers: int = 2
    lam: float = 0.6
    generator_loss: str = "non-saturating"
    batch_size: int = 64
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    reset_optimizer: bool = True
    eval_samples: int = 4096
    eval_every: int = 10
    reference_per_class: int = 1000
    classifier: str = "auto"  # auto | bayes-oracle | learned-mlp
    seed: int = 0

    def __post_init__(self):
        if len(self.bias) != self.spec.joint_cardinality:
            raise ValueError(
                f"bias vector has {len(self.bias)} entries; attributes define {self.spec.joint_cardinality} classes"
            )
        if not 0.0 < self.perc <= 1.0:
            raise ValueError(f"perc must lie in (0, 1], got {self.perc}")
        FamilyKind(self.family)
        LossConfig(self.lam, self.generator_loss, self.batch_size, self.lr_g, self.lr_d, self.beta1, self.beta2)

    @property
    def spec(self) -> AttributeSpec:
        return AttributeSpec(self.attributes)

    @property
    def family_kind(self) -> FamilyKind:
        return FamilyKind(self.family)

    def make_family(self) -> SyntheticFamily:
        if self.family_kind is FamilyKind.GAUSSIAN_MIXTURE_2D:
            return gaussian_mixture_2d(self.spec, self.mixture_radius)
        return procedural_image_8x8(self.spec)

    @property
    def arch(self) -> ArchSpec:
        return ArchSpec(self.latent_dim, self.g_hidden, self.d_hidden or None)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lam, self.generator_loss, self.batch_size, self.lr_g, self.lr_d, self.beta1, self.beta2)

    @property
    def n_ref(self) -> int:
        return round(self.perc * self.size_bias)

    def adapt_schedule(self, n_ref: int | None = None) -> tuple[int, int]:
        """(adaptation epochs, linear-probing epochs) for a reference set of ``n_ref`` samples.

        Epochs are raised until the run takes at least ``adapt_min_steps``
        optimizer steps, so tiny reference sets still get a real adaptation.
        """
        n_ref = self.n_ref if n_ref is None else n_ref
        batches = max(1, math.ceil(n_ref / self.batch_size))
        epochs = max(self.adapt_epochs, math.ceil(self.adapt_min_steps / batches))
        lp = self.lp_epochs if self.lp_epochs >= 0 else int(round(self.lp_fraction * epochs))
        return epochs, lp

    def resolved(self) -> dict:
        """Every setting with derived values filled in; this is what gets hashed."""
        out = dataclasses.asdict(self)
        epochs, lp = self.adapt_schedule()
        out.update(adapt_epochs_resolved=epochs, lp_epochs_resolved=lp, n_ref=self.n_ref,
                   classifier_resolved=self.classifier_kind)
        return out

    @property
    def classifier_kind(self) -> str:
        if self.classifier != "auto":
            return self.classifier
        return "bayes-oracle" if self.family_kind is FamilyKind.GAUSSIAN_MIXTURE_2D else "learned-mlp"

    def hash(self, exclude_seed: bool = False) -> str:
        cfg = self.resolved()
        if exclude_seed:
            cfg.pop("seed")
        return config_hash(cfg)

    def pretrain_stage(self, seed: int) -> StageConfig:
        return StageConfig(self.pretrain_epochs, self.loss, None, seed, self.eval_every, self.reset_optimizer)

    def adapt_stage(self, method: str, seed: int, n_ref: int | None = None, n_disc_layers: int | None = None,
                    lam: float | None = None, lp_epochs: int | None = None) -> StageConfig:
        epochs, lp = self.adapt_schedule(n_ref)
        if lp_epochs is not None:
            lp = lp_epochs
        loss = self.loss if lam is None else dataclasses.replace(self.loss, lam=lam)
        freeze = None
        if Stage(method) is Stage.FAIRTLPP and lp > 0:
            depth = n_disc_layers if n_disc_layers is not None else len(self.d_hidden or self.g_hidden) + 1
            freeze = FreezeMask.lower_layers(depth, self.frozen_layers, lp)
        return StageConfig(epochs, loss, freeze, seed, self.eval_every, self.reset_optimizer)


# --- key/value config files -------------------------------------------------

def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if name == "attributes":
        out = []
        for part in raw.split(","):
            attr, _, card = part.strip().partition(":")
            out.append((attr.strip(), int(card)))
        return tuple(out)
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, tuple):
        if not raw:
            return ()
        conv = float if name == "bias" else int
        return tuple(conv(t) for t in raw.split(","))
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{n}:{c}" for n, c in v)
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_from_mapping(values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(RunConfig)}
    kwargs = dict(defaults)
    for key, raw in values.items():
        key = key.strip().replace("-", "_")
        if key not in defaults:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = _parse_value(key, str(raw), defaults[key])
    return RunConfig(**kwargs)


def write_config(cfg: RunConfig, path: str | Path, grid: "ExperimentGrid | None" = None) -> None:
    """Write the fully resolved configuration as a ``[run]`` key/value file."""
    parser = configparser.ConfigParser()
    parser["run"] = {f.name: _format_value(getattr(cfg, f.name)) for f in dataclasses.fields(RunConfig)}
    if grid is not None:
        parser["grid"] = grid.to_mapping()
    with open(path, "w") as fh:
        parser.write(fh)


def read_config(path: str | Path) -> tuple[RunConfig, dict[str, str]]:
    """Parse a config file: the ``[run]`` section into a RunConfig, ``[grid]`` returned raw."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ValueError(f"cannot read config file {path}")
    run = dict(parser["run"]) if parser.has_section("run") else {}
    grid = dict(parser["grid"]) if parser.has_section("grid") else {}
    return config_from_mapping(run), grid


# --- single experiment unit ---------------------------------------------------

def bias_id(bias: Sequence[float]) -> str:
    """``(0.9, 0.1)`` -> ``"90_10"``; percentages with trailing zeros trimmed."""
    return "_".join(f"{100 * b:.4f}".rstrip("0").rstrip(".") for b in bias)


def base_size(cfg: RunConfig) -> int:
    """Pool size large enough for any perc, so D_bias is identical across a perc sweep."""
    k = cfg.spec.joint_cardinality
    need = max(largest_remainder(cfg.size_bias, list(cfg.bias))) + math.ceil(cfg.size_bias / k) + cfg.holdout_per_class
    return k * need


def build_data(cfg: RunConfig, bias_key: int = 0) -> DatasetPair:
    family, spec = cfg.make_family(), cfg.spec
    rng = Rng(derive_seed(cfg.seed, bias_key, _K_DATA))
    base = generate_base(family, spec, base_size(cfg), rng.spawn(0))
    return build_dataset_pair(base, cfg.bias, cfg.size_bias, cfg.perc, rng.spawn(1), cfg.holdout_per_class)


def build_evaluator(cfg: RunConfig, pair: DatasetPair, keys: tuple[int, int] = (0, 0)) -> Evaluator:
    spec = cfg.spec
    ref = balanced_reference_stats(
        pair.eval_holdout, spec, cfg.reference_per_class, Rng(derive_seed(cfg.seed, *keys, _K_REF))
    )
    if cfg.classifier_kind == "bayes-oracle":
        clf: AttrClassifier = bayes_oracle(cfg.make_family(), spec)
    else:
        clf = train_attr_classifier(
            pair.eval_holdout, spec, Rng(derive_seed(cfg.seed, *keys, _K_CLF)), ClassifierConfig(),
            cfg.family_kind, training_ids=pair.training_ids,
        )
    return Evaluator(clf, ref, cfg.eval_samples, cfg.hash())


@dataclass
class CellResult:
    method: str
    perc: float
    bias_id: str
    seed: int
    fd: float = float("nan")
    frechet: float = float("nan")
    runtime_s: float = 0.0
    config_hash: str = ""
    error: str | None = None
    series: list[MetricsReport] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.error is None


def run_unit(
    cfg: RunConfig,
    methods: Sequence[str] = METHODS,
    keys: tuple[int, int] = (0, 0),
    out_dir: Path | None = None,
) -> list[CellResult]:
    """Build data, pretrain once and evaluate each method; failures are per cell."""
    bid = bias_id(cfg.bias)
    row_hash = cfg.hash(exclude_seed=True)
    results = {m: CellResult(m, cfg.perc, bid, cfg.seed, config_hash=row_hash) for m in methods}
    try:
        pair = build_data(cfg, keys[0])
        evaluator = build_evaluator(cfg, pair, keys)
        t0 = time.perf_counter()
        pre = pretrain(
            union(strip_labels(pair.d_bias), strip_labels(pair.d_ref)), cfg.arch,
            cfg.pretrain_stage(derive_seed(cfg.seed, *keys, _K_PRE)), evaluator,
        )
        pre_time = time.perf_counter() - t0
    except Exception as exc:  # recorded per cell; the grid keeps going
        err = f"{type(exc).__name__}: {exc}"
        log.warning("unit %s perc=%s seed=%s failed: %s", bid, cfg.perc, cfg.seed, err)
        for r in results.values():
            r.error = err
        return list(results.values())

    ref = strip_labels(pair.d_ref)
    adapt_seed = derive_seed(cfg.seed, *keys, _K_ADAPT)
    eval_seed = derive_seed(cfg.seed, *keys, _K_EVAL)
    for method in methods:
        res = results[method]
        try:
            if method == "pretrained":
                state, series, runtime = pre.state, pre.metrics, pre_time
            else:
                stage_cfg = cfg.adapt_stage(method, adapt_seed, len(ref), pre.state.discriminator.n_layers)
                adapt = adapt_fairtl if Stage(method) is Stage.FAIRTL else adapt_fairtlpp
                rec = adapt(pre.state, ref, stage_cfg, evaluator)
                state, series, runtime = rec.state, rec.metrics, rec.runtime_s
            report = evaluator(state, Rng(eval_seed))
            res.fd, res.frechet, res.runtime_s, res.series = report.fd, report.frechet_sq, runtime, series
            if out_dir is not None:
                _persist_cell(out_dir, cfg, res, state)
        except Exception as exc:
            res.error = f"{type(exc).__name__}: {exc}"
            log.debug("cell failed:\n%s", traceback.format_exc())
    return [results[m] for m in methods]


def cell_dir(out_dir: Path, res: CellResult) -> Path:
    return Path(out_dir) / "cells" / res.bias_id / f"perc_{res.perc!r}" / f"seed_{res.seed}"


def _safe(method: str) -> str:
    return method.replace("+", "p")


def _persist_cell(out_dir: Path, cfg: RunConfig, res: CellResult, state: GanState) -> None:
    d = cell_dir(out_dir, res)
    d.mkdir(parents=True, exist_ok=True)
    name = _safe(res.method)
    save_checkpoint(state, d / f"{name}.ckpt", cfg.hash(), cfg.seed,
                    metadata={"method": res.method, "bias_id": res.bias_id, "perc": res.perc})
    with open(d / f"{name}_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "fd", "frechet_sq", "n_samples"])
        for m in res.series:
            w.writerow([m.epoch, f"{m.fd:.17g}", f"{m.frechet_sq:.17g}", m.n_samples])
    (d / f"{name}.json").write_text(json.dumps(
        {"method": res.method, "perc": res.perc, "bias_id": res.bias_id, "seed": res.seed, "fd": res.fd,
         "frechet_sq": res.frechet, "config_hash": cfg.hash(), "row_config_hash": res.config_hash},
        indent=1, sort_keys=True))


# --- grids ----------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentGrid:
    base: RunConfig
    biases: tuple[tuple[float, ...], ...]
    percs: tuple[float, ...]
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if not (self.biases and self.percs and self.methods and self.seeds):
            raise ValueError("every grid dimension must be non-empty")
        for p in self.percs:
            if not 0.0 < p <= 1.0:
                raise ValueError(f"perc {p} outside (0, 1]")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {METHODS}")

    def units(self) -> list[tuple[int, int, RunConfig]]:
        out = []
        for bi, bias in enumerate(self.biases):
            for pi, perc in enumerate(self.percs):
                for seed in self.seeds:
                    out.append((bi, pi, dataclasses.replace(self.base, bias=tuple(bias), perc=perc, seed=seed)))
        return out

    def to_mapping(self) -> dict[str, str]:
        return {
            "biases": "; ".join(",".join(repr(b) for b in bias) for bias in self.biases),
            "percs": ",".join(repr(p) for p in self.percs),
            "methods": ",".join(self.methods),
            "seeds": ",".join(str(s) for s in self.seeds),
        }

    @classmethod
    def from_mapping(cls, base: RunConfig, grid: dict[str, str]) -> "ExperimentGrid":
        biases = tuple(tuple(float(t) for t in part.split(",")) for part in grid.get("biases", "").split(";")
                       if part.strip()) or (base.bias,)
        percs = tuple(float(t) for t in grid.get("percs", "").split(",") if t.strip()) or (base.perc,)
        methods = tuple(t.strip() for t in grid.get("methods", "").split(",") if t.strip()) or METHODS
        seeds = tuple(int(t) for t in grid.get("seeds", "").split(",") if t.strip()) or (base.seed,)
        return cls(base, biases, percs, methods, seeds)


def _run_unit_job(args):
    bi, pi, cfg, methods, out_dir = args
    return run_unit(cfg, methods, (bi, pi), out_dir)


@dataclass
class GridResult:
    cells: list[CellResult]
    rows: list["ReportRow"]

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if not c.ok]


def run_grid(grid: ExperimentGrid, out_dir: str | Path | None = None, parallelism: int = 1,
             force: bool = False) -> GridResult:
    """Execute every (method, perc, bias, seed) cell once and aggregate over seeds.

    With ``out_dir`` set, checkpoints, metric time series, ``report.csv`` and
    SVG plots are written there.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_config(grid.base, out / "config.ini", grid)
    jobs = [(bi, pi, cfg, grid.methods, out) for bi, pi, cfg in grid.units()]
    if parallelism <= 1:
        nested = [_run_unit_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            nested = list(pool.map(_run_unit_job, jobs))
    cells = [c for unit in nested for c in unit]
    order = {
        "bias": {bias_id(b): i for i, b in enumerate(grid.biases)},
        "perc": {p: i for i, p in enumerate(grid.percs)},
    }
    rows = aggregate(cells, grid.methods, order, force=force)
    if out is not None and rows:
        emit_reports(rows, out)
        (out / "failures.json").write_text(json.dumps(
            [{"method": c.method, "perc": c.perc, "bias_id": c.bias_id, "seed": c.seed, "error": c.error}
             for c in cells if not c.ok], indent=1))
    return GridResult(cells, rows)


# --- aggregation and reports ------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    method: str
    perc: float
    bias_id: str
    seeds: int
    fd_mean: float
    fd_std: float | None
    frechet_mean: float
    frechet_std: float | None
    runtime_s: float
    config_hash: str = ""


class AggregationError(ValueError):
    pass


def aggregate(cells: Sequence[CellResult], methods: Sequence[str] = METHODS, order: dict | None = None,
              force: bool = False) -> list[ReportRow]:
    """One row per (method, perc, bias) over successful seeds; std needs >= 2 seeds."""
    groups: dict[tuple, list[CellResult]] = {}
    for c in cells:
        if c.ok:
            groups.setdefault((c.bias_id, c.perc, c.method), []).append(c)
    order = order or {}
    b_ord, p_ord = order.get("bias", {}), order.get("perc", {})
    m_ord = {m: i for i, m in enumerate(methods)}
    keys = sorted(groups, key=lambda k: (b_ord.get(k[0], 0), k[0], p_ord.get(k[1], 0), m_ord.get(k[2], 0)))
    rows = []
    for key in keys:
        group = sorted(groups[key], key=lambda c: c.seed)
        hashes = {c.config_hash for c in group}
        if len(hashes) > 1 and not force:
            raise AggregationError(f"cells for {key} have different config hashes: {sorted(hashes)}")
        fd = np.array([c.fd for c in group])
        fr = np.array([c.frechet for c in group])
        multi = len(group) >= 2
        rows.append(ReportRow(
            key[2], key[1], key[0], len(group),
            float(fd.mean()), float(fd.std(ddof=1)) if multi else None,
            float(fr.mean()), float(fr.std(ddof=1)) if multi else None,
            float(sum(c.runtime_s for c in group)), group[0].config_hash,
        ))
    return rows


def _num(x: float | None) -> str:
    return "" if x is None else f"{x:.17g}"


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    if not rows:
        raise ValueError("no report rows to write")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.method, _num(r.perc), r.bias_id, r.seeds, _num(r.fd_mean), _num(r.fd_std),
                    _num(r.frechet_mean), _num(r.frechet_std), _num(r.runtime_s)])
    return buf.getvalue()


def read_report_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and list(rows[0].keys()) != CSV_HEADER:
        raise ValueError("report CSV header does not match the documented layout")
    return rows


_COLORS = {"pretrained": "#7f7f7f", "fairTL": "#1f77b4", "fairTL++": "#d62728"}


def svg_line_plot(title: str, x_labels: Sequence[str], series: dict[str, list[tuple[float, float | None]]],
                  y_label: str) -> str:
    """Categorical-x line plot with optional ±std error bars, as an SVG string."""
    w, h, left, right, top, bottom = 480, 320, 64, 110, 36, 48
    pw, ph = w - left - right, h - top - bottom
    vals = [m + (s or 0.0) for pts in series.values() for m, s in pts if m == m]
    lows = [m - (s or 0.0) for pts in series.values() for m, s in pts if m == m]
    y_max = max(vals, default=1.0)
    y_min = min(0.0, min(lows, default=0.0))
    if y_max <= y_min:
        y_max = y_min + 1.0
    n = len(x_labels)

    def px(i):
        return left + (pw * (i + 0.5) / n)

    def py(v):
        return top + ph * (1.0 - (v - y_min) / (y_max - y_min))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in range(5):
        v = y_min + (y_max - y_min) * t / 4
        out.append(f'<line x1="{left - 4}" y1="{py(v):.2f}" x2="{left}" y2="{py(v):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{py(v) + 4:.2f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{v:.3g}</text>')
    for i, lab in enumerate(x_labels):
        out.append(f'<text x="{px(i):.2f}" y="{top + ph + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{lab}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{h - 10}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="11">perc = |D_ref| / |D_bias|</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="11" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{y_label}</text>')
    for k, (name, pts) in enumerate(series.items()):
        color = _COLORS.get(name, "#2ca02c")
        coords = [(px(i), py(m)) for i, (m, _) in enumerate(pts) if m == m]
        if coords:
            path = " ".join(f"{x:.2f},{y:.2f}" for x, y in coords)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
        for i, (m, s) in enumerate(pts):
            if m != m:
                continue
            out.append(f'<circle cx="{px(i):.2f}" cy="{py(m):.2f}" r="3" fill="{color}"/>')
            if s:
                out.append(f'<line x1="{px(i):.2f}" y1="{py(m - s):.2f}" x2="{px(i):.2f}" y2="{py(m + s):.2f}" '
                           f'stroke="{color}"/>')
        ly = top + 14 * k + 6
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}" font-family="sans-serif" font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plots_from_csv(text: str) -> dict[str, str]:
    """SVG plots (FD and Fréchet vs perc, one line per method) for each bias id in a report CSV."""
    rows = read_report_csv(text)
    plots = {}
    for bid in dict.fromkeys(r["bias_id"] for r in rows):
        sub = [r for r in rows if r["bias_id"] == bid]
        percs = list(dict.fromkeys(r["perc"] for r in sub))
        methods = list(dict.fromkeys(r["method"] for r in sub))
        for metric, col, label in (("fd", "fd", "FD"), ("frechet", "frechet", "Fréchet distance²")):
            series = {}
            for m in methods:
                pts = []
                for p in percs:
                    hit = [r for r in sub if r["method"] == m and r["perc"] == p]
                    if hit:
                        std = hit[0][f"{col}_std"]
                        pts.append((float(hit[0][f"{col}_mean"]), float(std) if std else None))
                    else:
                        pts.append((float("nan"), None))
                series[m] = pts
            labels = [f"{float(p):g}" for p in percs]
            plots[f"{metric}_vs_perc_{bid}.svg"] = svg_line_plot(f"{label} vs perc (bias {bid})", labels, series, label)
    return plots


def emit_reports(rows: Sequence[ReportRow], out_dir: str | Path) -> dict[str, Path]:
    """Write ``report.csv`` and the SVG plots derived from it; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = rows_to_csv(rows)
    written = {"report.csv": out / "report.csv"}
    written["report.csv"].write_text(text)
    for name, svg in plots_from_csv(text).items():
        (out / name).write_text(svg)
        written[name] = out / name
    hashes = sorted({r.config_hash for r in rows})
    (out / "report.meta.json").write_text(json.dumps({"row_config_hashes": hashes}, indent=1))
    return written


def numeric_columns(csv_text: str, exclude: Sequence[str] = ("runtime_s",)) -> list[list[str]]:
    """The CSV's deterministic columns, for reproducibility comparisons (wall-clock excluded)."""
    rows = read_report_csv(csv_text)
    keep = [c for c in CSV_HEADER if c not in exclude]
    return [[r[c] for c in keep] for r in rows]


# --- dataset directories, layer study and galleries ----------------------------------

DATA_FILES = {"d_bias": "d_bias.txt", "d_ref": "d_ref.txt", "eval_holdout": "holdout.txt"}


def save_pair(pair: DatasetPair, k: int, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for attr, name in DATA_FILES.items():
        paths[attr] = out / name
        save_dataset(getattr(pair, attr), k, paths[attr])
    (out / "pair.json").write_text(json.dumps({"bias_vector": list(pair.bias_vector), "perc": pair.perc, "k": k}))
    return paths


def load_pair(data_dir: str | Path) -> DatasetPair:
    d = Path(data_dir)
    meta = json.loads((d / "pair.json").read_text())
    sets = {attr: load_dataset(d / name)[0] for attr, name in DATA_FILES.items()}
    return DatasetPair(sets["d_bias"], sets["d_ref"], sets["eval_holdout"], tuple(meta["bias_vector"]), meta["perc"])


def run_layer_study(cfg: RunConfig, zero_epochs: bool = False) -> LayerChangeStudy:
    """Pretrain on D_bias ∪ D_ref, adapt with fairTL on D_ref, report per-layer weight change.

    ``cfg.perc`` should be large (1.0 makes D_ref half the pretraining set).
    ``zero_epochs`` runs the adaptation for no epochs, a control whose changes
    are exactly zero.
    """
    pair = build_data(cfg)
    ref = strip_labels(pair.d_ref)
    epochs = 0 if zero_epochs else cfg.adapt_epochs
    adapt_cfg = StageConfig(epochs, cfg.loss, None, derive_seed(cfg.seed, 0, 0, _K_ADAPT), 0, cfg.reset_optimizer)
    pre_cfg = dataclasses.replace(cfg.pretrain_stage(derive_seed(cfg.seed, 0, 0, _K_PRE)), eval_every=0)
    return layer_change_study(union(strip_labels(pair.d_bias), ref), ref, cfg.arch, pre_cfg, adapt_cfg)


def layer_study_csv(study: LayerChangeStudy) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["network", "layer", "mean_change"])
    for r in study.rows:
        w.writerow([r.network, r.layer, f"{r.mean_change:.17g}"])
    return buf.getvalue()


def gallery_csv(gallery: Gallery) -> str:
    """One line per shared latent row: index, then 'before' and 'after' features."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = gallery.before.shape[1]
    w.writerow(["row"] + [f"before_{j}" for j in range(dim)] + [f"after_{j}" for j in range(dim)])
    for i in range(len(gallery)):
        w.writerow([i] + [f"{v:.17g}" for v in gallery.before[i]] + [f"{v:.17g}" for v in gallery.after[i]])
    return buf.getvalue()


def gallery_svg(gallery: Gallery) -> str:
    """Side-by-side view: 2-D samples as a scatter, 64-D samples as 8x8 tiles (before | after)."""
    dim = gallery.before.shape[1]
    if dim == 64:
        tile, gap = 4, 6
        n = len(gallery)
        w, h = 2 * (8 * tile + gap) + gap, n * (8 * tile + gap) + gap
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
               f'<rect width="{w}" height="{h}" fill="white"/>']
        for i in range(n):
            for col, img in enumerate((gallery.before[i], gallery.after[i])):
                x0, y0 = gap + col * (8 * tile + gap), gap + i * (8 * tile + gap)
                for p, v in enumerate(np.clip(img, 0.0, 1.0)):
                    g = int(round(255 * v))
                    out.append(f'<rect x="{x0 + tile * (p % 8)}" y="{y0 + tile * (p // 8)}" width="{tile}" '
                               f'height="{tile}" fill="rgb({g},{g},{g})"/>')
        out.append("</svg>")
        return "\n".join(out) + "\n"
    pts = np.concatenate([gallery.before[:, :2], gallery.after[:, :2]]) if len(gallery) else np.zeros((1, 2))
    lo, hi = pts.min(axis=0) - 0.5, pts.max(axis=0) + 0.5
    size, pad = 300, 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * size + 3 * pad}" height="{size + 2 * pad}">',
           f'<rect width="{2 * size + 3 * pad}" height="{size + 2 * pad}" fill="white"/>']
    for col, arr, color in ((0, gallery.before, "#7f7f7f"), (1, gallery.after, "#d62728")):
        x0 = pad + col * (size + pad)
        out.append(f'<rect x="{x0}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="black"/>')
        for x, y in arr[:, :2]:
            cx = x0 + size * (x - lo[0]) / (hi[0] - lo[0])
            cy = pad + size * (1 - (y - lo[1]) / (hi[1] - lo[1]))
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2" fill="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
