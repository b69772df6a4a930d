"""Experiment orchestration: build poisoned scenarios, run defenses, aggregate."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .attacks import (
    AttackConfig,
    ClusterModel,
    PoisonCraftResult,
    craft_convex_polytope,
    craft_feature_collision,
)
from .dataset import FeatureDataset, PoisonLedger, class_stats, resolve_k
from .defenses import l2_outlier_filter, ocsvm_filter, random_eviction_filter
from .extractor import ExtractorModel, extract_features, make_extractor
from .filters import FilterReport, no_filter
from .knn import deep_knn_filter
from .victim import LinearHead, TrainConfig, TrialInputs, TrialRow, run_trial, undefended_reference

log = logging.getLogger(__name__)

SCENARIOS = ("feature_collision", "convex_polytope")
DEFENSES = ("none", "deep_knn", "l2_outlier", "ocsvm", "random_eviction")
DEFAULT_K_GRID = (0.1, 0.2, 0.4, 1.0, 2.0, 4.0, 8.0)
DEFAULT_RATIOS = tuple(round(0.1 * i, 1) for i in range(1, 11))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    classes: int = 10
    per_class: int = 50
    test_per_class: int = 50
    d_in: int = 32
    hidden: int = 64
    d_feat: int = 32
    separation: float = 10.0
    input_scale: float = 1.0
    nonlinearity: str = "tanh"
    target_label: int = 0
    base_label: int = 1
    target_pool: int = 1


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "deep_knn"
    normalized_k: float | None = 2.0
    k: int | None = None
    epsilon: float = 0.01
    nu: float = 0.01
    gamma_rbf: float | None = None
    fraction: float = 0.01
    seed: int = 0

    def build(self) -> Callable[[FeatureDataset], FilterReport]:
        kind = self.kind
        if kind == "none":
            return no_filter
        if kind == "deep_knn":
            def _knn(ds: FeatureDataset) -> FilterReport:
                k = self.k if self.k is not None else resolve_k(self.normalized_k, class_stats(ds))
                rep = deep_knn_filter(ds, k)
                if self.normalized_k is not None and self.k is None:
                    rep.parameters["normalized_k"] = self.normalized_k
                return rep
            return _knn
        if kind == "l2_outlier":
            return lambda ds: l2_outlier_filter(ds, self.epsilon)
        if kind == "ocsvm":
            return lambda ds: ocsvm_filter(ds, self.nu, self.gamma_rbf)
        if kind == "random_eviction":
            return lambda ds: random_eviction_filter(ds, self.fraction, self.seed)
        raise ConfigError(f"unknown defense kind {kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "convex_polytope"
    trials: int = 20
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(n_poisons=5))
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    victim: TrainConfig = field(default_factory=TrainConfig)
    rebalance: bool = False
    imbalance_ratio: float = 1.0
    k_grid: tuple[float, ...] = DEFAULT_K_GRID
    ratios: tuple[float, ...] = DEFAULT_RATIOS

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.defense.kind not in DEFENSES:
            raise ConfigError(f"defense.kind must be one of {DEFENSES}, got {self.defense.kind!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not 0.0 < self.imbalance_ratio <= 1.0:
            raise ConfigError("imbalance_ratio must lie in (0, 1]")
        if self.data.target_label == self.data.base_label:
            raise ConfigError("target and base labels must differ")
        if self.attack.n_poisons > self.data.per_class:
            raise ConfigError("n_poisons cannot exceed per_class (poisons replace base points)")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# key = value config files

_SECTIONS = {"data": DataConfig, "attack": AttackConfig, "defense": DefenseConfig, "victim": TrainConfig}
_TOP = {"scenario", "trials", "seed", "rebalance", "imbalance_ratio", "jobs"}
_SWEEP = {"sweep.k_grid": "k_grid", "sweep.ratios": "ratios"}


def _coerce(raw: str, kind: Any, key: str):
    raw = raw.strip().strip('"').strip("'")
    kind_s = str(kind)
    try:
        if raw.lower() in ("none", "null", "") and ("None" in kind_s or "Optional" in kind_s):
            return None
        if kind is bool or kind_s == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in kind_s and "float" not in kind_s:
            return int(raw)
        if "float" in kind_s and "tuple" not in kind_s:
            return float(raw)
        if "tuple" in kind_s:
            return tuple(float(v) for v in raw.strip("[]()").split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def build_config(values: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply flat ``section.key`` overrides on top of ``base`` (defaults if None)."""
    base = base or ExperimentConfig()
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    hints = {f.name: f.type for f in fields(ExperimentConfig)}
    for key, raw in values.items():
        if key in _SWEEP:
            top[_SWEEP[key]] = _coerce(raw, "tuple", key)
        elif key in _TOP:
            if key == "jobs":
                continue
            top[key] = _coerce(raw, hints[key], key)
        elif "." in key and key.split(".", 1)[0] in _SECTIONS:
            section, name = key.split(".", 1)
            cls = _SECTIONS[section]
            known = {f.name: f.type for f in fields(cls)}
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            sections[section][name] = _coerce(raw, known[name], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        for section, vals in sections.items():
            if vals:
                top[section] = replace(getattr(base, section), **vals)
        return replace(base, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update(overrides or {})
    return build_config(values)


# ---------------------------------------------------------------------------
# scenario construction


def _child_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


@dataclass(eq=False)
class World:
    """State shared by every trial of an experiment: cluster means and phi."""

    clusters: ClusterModel
    extractor: ExtractorModel

    @classmethod
    def create(cls, cfg: ExperimentConfig) -> "World":
        d = cfg.data
        rng = np.random.default_rng(_child_seed(cfg.seed, 0))
        clusters = ClusterModel.create(d.classes, d.d_in, d.separation, rng)
        extractor = make_extractor(
            d.d_in, d.d_feat, d.hidden, _child_seed(cfg.seed, 1), d.nonlinearity, d.input_scale
        )
        return cls(clusters, extractor)


@dataclass(eq=False)
class Scenario:
    """A crafted attack instance in input space plus its feature images."""

    trial: int
    seed: int
    train_input: FeatureDataset  # clean, balanced
    test_input: FeatureDataset
    target_input: np.ndarray
    target_id: int
    craft: PoisonCraftResult
    target_label: int
    base_label: int

    def trial_inputs(self, extractor: ExtractorModel, imbalance_ratio: float = 1.0) -> TrialInputs:
        clean = self.train_input
        if imbalance_ratio < 1.0:
            clean = _subsample_class(clean, self.target_label, imbalance_ratio, self.seed)
        base_ids = set(self.craft.base_ids)
        keep = ~np.isin(clean.ids, list(base_ids))
        poisoned = clean.select(keep).append(
            self.craft.poisons, [self.base_label] * len(base_ids), list(self.craft.base_ids)
        )
        order = np.argsort(poisoned.ids, kind="stable")
        poisoned = poisoned.select(order)
        ledger = PoisonLedger(frozenset(base_ids), self.target_id, self.base_label, self.target_label)
        return TrialInputs(
            extract_features(extractor, poisoned),
            extract_features(extractor, self.test_input),
            extractor(self.target_input),
            ledger,
            self.trial,
            self.seed,
        )


def _subsample_class(ds: FeatureDataset, label: int, ratio: float, seed: int) -> FeatureDataset:
    members = np.flatnonzero(ds.labels == label)
    n = max(1, int(math.floor(ratio * len(members) + 0.5)))
    rng = np.random.default_rng(_child_seed(seed, 7))
    # a nested family: the points kept at a smaller ratio are kept at every larger one
    chosen = members[rng.permutation(len(members))[:n]]
    keep = ds.labels != label
    keep[chosen] = True
    return ds.select(keep)


def _pick_target(world: World, cfg: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    d = cfg.data
    pool = world.clusters.sample_class(d.target_label, max(1, d.target_pool), rng)
    if len(pool) == 1:
        return pool[0]
    # attacker's choice: the candidate closest to the base class mean in feature space
    base_mean = world.extractor(world.clusters.means[d.base_label][None, :])[0]
    dist = np.linalg.norm(world.extractor(pool) - base_mean, axis=1)
    return pool[int(np.argmin(dist))]


def build_scenario(world: World, cfg: ExperimentConfig, trial: int) -> Scenario:
    d = cfg.data
    seed = _child_seed(cfg.seed, 100, trial)
    rng = np.random.default_rng(seed)
    train = world.clusters.sample(d.per_class, rng, start_id=0)
    test = world.clusters.sample(d.test_per_class, rng, start_id=len(train) + 1)
    target_id = len(train)
    x_t = _pick_target(world, cfg, rng)
    base_pos = np.flatnonzero(train.labels == d.base_label)
    chosen = np.sort(rng.choice(base_pos, size=cfg.attack.n_poisons, replace=False))
    acfg = replace(cfg.attack, seed=seed)
    crafter = craft_feature_collision if cfg.scenario == "feature_collision" else craft_convex_polytope
    craft = crafter(world.extractor, x_t, train.points[chosen], acfg, train.ids[chosen].tolist(), target_id)
    return Scenario(trial, seed, train, test, x_t, target_id, craft, d.target_label, d.base_label)


# ---------------------------------------------------------------------------
# running trials

ROW_FIELDS = [
    "scenario",
    "defense",
    "normalized_k",
    "k",
    "class_balance_ratio",
    "rebalance",
    "trial",
    "seed",
    "qualifies",
    "undefended_outcome",
    "outcome",
    "defense_success",
    "off_class",
    "target_pred",
    "poisons_removed",
    "n_poisons",
    "clean_removed",
    "n_clean",
    "clean_removed_pct",
    "tp",
    "fp",
    "tn",
    "fn",
    "mcc",
    "test_accuracy",
    "undefended_test_accuracy",
    "n_train",
]


@dataclass
class ExperimentReport:
    config: dict[str, Any]
    rows: list[dict[str, Any]]
    aggregates: dict[str, Any]
    failures: list[dict[str, Any]] = field(default_factory=list)
    label: dict[str, Any] = field(default_factory=dict)
    version: str = f"deepknn {__version__}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "label": self.label,
            "config": self.config,
            "aggregates": self.aggregates,
            "rows": self.rows,
            "failures": self.failures,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentReport":
        rep = cls(doc["config"], doc["rows"], doc["aggregates"], doc.get("failures", []), doc.get("label", {}), doc["version"])
        recomputed = aggregate_rows(rep.rows)
        if recomputed != rep.aggregates:
            raise ValueError("report aggregates do not match its rows")
        return rep


def _row_dict(row: TrialRow, cfg: ExperimentConfig, k: int | None) -> dict[str, Any]:
    r = dataclasses.asdict(row)
    clean_frac = r.pop("clean_removed_fraction")
    r.update(
        scenario=cfg.scenario,
        defense=cfg.defense.kind,
        normalized_k=cfg.defense.normalized_k if cfg.defense.kind == "deep_knn" and cfg.defense.k is None else None,
        k=k,
        class_balance_ratio=cfg.imbalance_ratio,
        rebalance=cfg.rebalance,
        clean_removed_pct=100.0 * clean_frac,
    )
    return {key: r[key] for key in ROW_FIELDS}


def aggregate_rows(rows: Sequence[dict[str, Any]]) -> dict[str, Any]:
    q = [r for r in rows if r["qualifies"]]
    n = len(q)

    def mean(key):
        return sum(r[key] for r in q) / n if n else None

    succ = sum(1 for r in q if r["defense_success"])
    return {
        "trials": len(rows),
        "qualifying_trials": n,
        "defense_successes": succ,
        "defense_success_rate": succ / n if n else None,
        "undefended_success_rate": 0.0 if n else None,
        "poisons_removed": sum(r["poisons_removed"] for r in q),
        "poisons_total": sum(r["n_poisons"] for r in q),
        "clean_removed": sum(r["clean_removed"] for r in q),
        "clean_total": sum(r["n_clean"] for r in q),
        "mean_clean_removed_pct": mean("clean_removed_pct"),
        "mean_mcc": mean("mcc"),
        "mean_test_accuracy": mean("test_accuracy"),
        "off_class": sum(1 for r in q if r["off_class"]),
    }


def _evaluate(
    scenario: Scenario,
    world: World,
    cfg: ExperimentConfig,
    undefended_cache: dict,
) -> dict[str, Any]:
    inputs = scenario.trial_inputs(world.extractor, cfg.imbalance_ratio)
    key = (cfg.imbalance_ratio, cfg.rebalance)
    k_seen: list[int] = []
    build = cfg.defense.build()

    def defense(ds: FeatureDataset) -> FilterReport:
        rep = build(ds)
        if "k" in rep.parameters:
            k_seen.append(int(rep.parameters["k"]))
        return rep

    if key not in undefended_cache:
        undefended_cache[key] = undefended_reference(inputs, cfg.victim, cfg.rebalance)
    row = run_trial(inputs, defense, cfg.victim, cfg.rebalance, undefended_cache[key])
    return _row_dict(row, cfg, k_seen[0] if k_seen else None)


def _trial_job(args) -> list[tuple[dict | None, str | None]]:
    """Evaluate one crafted trial at every grid configuration."""
    scenario, configs = args
    world = World.create(configs[0])
    cache: dict = {}
    out = []
    for cfg in configs:
        try:
            out.append((_evaluate(scenario, world, cfg, cache), None))
        except Exception as exc:  # trial-level isolation
            out.append((None, f"{type(exc).__name__}: {exc}"))
    return out


def _scenario_job(args):
    cfg, trial = args
    world = World.create(cfg)
    try:
        return trial, build_scenario(world, cfg, trial), None
    except Exception as exc:
        return trial, None, f"{type(exc).__name__}: {exc}"


def _map(fn, work, jobs: int):
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            return list(pool.map(fn, work))
    return [fn(w) for w in work]


def build_scenarios(cfg: ExperimentConfig, jobs: int = 1) -> tuple[dict[int, Scenario], list[dict]]:
    results = _map(_scenario_job, [(cfg, t) for t in range(cfg.trials)], jobs)
    scenarios, failures = {}, []
    for trial, scen, err in results:
        if err is None:
            scenarios[trial] = scen
        else:
            log.warning("trial %d failed while crafting: %s", trial, err)
            failures.append({"trial": trial, "stage": "craft", "error": err})
    return scenarios, failures


def evaluate_grid(
    scenarios: dict[int, Scenario],
    configs: Sequence[ExperimentConfig],
    labels: Sequence[dict[str, Any]],
    craft_failures: Sequence[dict] = (),
    jobs: int = 1,
) -> list[ExperimentReport]:
    """One report per config, all sharing the same crafted trials.

    Workers return results; reports are assembled here in trial order so the
    output does not depend on ``jobs``.
    """
    trials = sorted(scenarios)
    results = _map(_trial_job, [(scenarios[t], list(configs)) for t in trials], jobs)
    reports = []
    for g, (cfg, label) in enumerate(zip(configs, labels)):
        rows, fails = [], list(craft_failures)
        for t, per_cfg in zip(trials, results):
            row, err = per_cfg[g]
            if err is None:
                rows.append(row)
            else:
                log.warning("trial %d failed: %s", t, err)
                fails.append({"trial": t, "stage": "evaluate", "error": err})
        reports.append(ExperimentReport(cfg.to_dict(), rows, aggregate_rows(rows), fails, dict(label)))
    return reports


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    scenarios, failures = build_scenarios(cfg, jobs)
    return evaluate_grid(scenarios, [cfg], [{}], failures, jobs)[0]


def sweep_normalized_k(cfg: ExperimentConfig, grid: Sequence[float] | None = None, jobs: int = 1) -> list[ExperimentReport]:
    """One report per grid value; every grid point reuses the same crafted trials."""
    grid = tuple(cfg.k_grid if grid is None else grid)
    if not grid or any(not g > 0 for g in grid):
        raise ConfigError("normalized-k grid values must be positive")
    configs = [replace(cfg, defense=replace(cfg.defense, kind="deep_knn", normalized_k=float(g), k=None)) for g in grid]
    scenarios, failures = build_scenarios(cfg, jobs)
    return evaluate_grid(scenarios, configs, [{"normalized_k": float(g)} for g in grid], failures, jobs)


def sweep_imbalance(
    cfg: ExperimentConfig,
    ratios: Sequence[float] | None = None,
    rebalance: Sequence[bool] = (False, True),
    jobs: int = 1,
) -> list[ExperimentReport]:
    """Shrink the target class to ``ratio * N``; Deep k-NN at normalized-k 2."""
    ratios = tuple(cfg.ratios if ratios is None else ratios)
    if not ratios or any(not 0.0 < r <= 1.0 for r in ratios):
        raise ConfigError("imbalance ratios must lie in (0, 1]")
    configs, labels = [], []
    for r in ratios:
        for rb in rebalance:
            configs.append(
                replace(
                    cfg,
                    imbalance_ratio=float(r),
                    rebalance=bool(rb),
                    defense=replace(cfg.defense, kind="deep_knn", normalized_k=2.0, k=None),
                )
            )
            labels.append({"ratio": float(r), "rebalance": bool(rb)})
    scenarios, failures = build_scenarios(cfg, jobs)
    return evaluate_grid(scenarios, configs, labels, failures, jobs)


# ---------------------------------------------------------------------------
# projection


def emit_projection(
    ds: FeatureDataset,
    target_id: int,
    base_label: int,
    target_label: int,
    head: LinearHead,
) -> list[dict[str, Any]]:
    """Centroid-axis / decision-direction coordinates for every point.

    ``u`` runs along the unit vector from the target-class centroid to the
    base-class centroid (the target point itself is left out of the
    centroids); ``v`` is the base-minus-target weight direction with its
    ``u`` component removed.
    """
    others = ds.ids != target_id
    tmask = others & (ds.labels == target_label)
    bmask = others & (ds.labels == base_label)
    if not tmask.any() or not bmask.any():
        raise ValueError("both target and base classes need points")
    axis_u = ds.points[bmask].mean(0) - ds.points[tmask].mean(0)
    norm = np.linalg.norm(axis_u)
    if norm < 1e-12:
        raise ValueError("class centroids coincide; projection axis undefined")
    axis_u /= norm
    w = head.weights[base_label] - head.weights[target_label]
    w = w - (w @ axis_u) * axis_u
    wn = np.linalg.norm(w)
    if wn < 1e-12:
        raise ValueError("decision direction is parallel to the centroid axis")
    axis_v = w / wn
    u = ds.points @ axis_u
    v = ds.points @ axis_v
    return [
        {"id": int(i), "label": int(l), "u": float(a), "v": float(b)}
        for i, l, a, b in zip(ds.ids, ds.labels, u, v)
    ]


# ---------------------------------------------------------------------------
# output files


def rows_to_csv(rows: Sequence[dict[str, Any]], fieldnames: Sequence[str] = ROW_FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def write_reports(reports: Sequence[ExperimentReport], out_dir, fmt: str = "csv") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rep in reports:
        rows.extend(rep.rows)
    docs = [rep.to_dict() for rep in reports]
    report_doc = docs[0] if len(docs) == 1 else {"version": reports[0].version, "reports": docs}
    paths = {"report": out / "report.json", "rows": out / "rows.csv", "failures": out / "failures.log"}
    paths["report"].write_text(json.dumps(report_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if fmt == "json":
        paths["rows"] = out / "rows.json"
        paths["rows"].write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        paths["rows"].write_text(rows_to_csv(rows), encoding="utf-8")
    lines = []
    for rep in reports:
        for f in rep.failures:
            lines.append(f"{json.dumps(rep.label, sort_keys=True)} trial={f['trial']} stage={f['stage']} {f['error']}")
    paths["failures"].write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return paths
