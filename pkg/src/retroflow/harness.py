"""Experiment orchestration: data generation, training, evaluation and ablations.

Every product of a run gets its own random stream
``RandomStream(seed).child(product_index, group)``, where ``group`` is the
synthon candidate (0 for product-conditioned modes). Plain sample ``j``
uses trajectory slot ``j`` of that stream; best-of-K and SMC run ``i``,
particle ``m`` use slot ``i * K + m``. So methods share common random
numbers, ``greedy`` with ``K = 1`` and SMC with ``K = 1`` reproduce plain
sampling exactly, and larger plain budgets extend smaller ones.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import ESTIMATES, CouplingDataset, GraphFeaturizer, TabularDenoiser, TrainingGroup, train_tabular
from .discrete import RandomStream
from .flow import STEPPERS, StreamBatch, TimeGrid, simulate_batch
from .graph import AttributedGraph, flatten, graph_vocab, pad_with_dummies
from .retro import (
    GeneratorConfig,
    Reaction,
    RankedPredictionSet,
    RewardOracle,
    derive_synthons,
    generate_dataset,
    merge_synthon_budgets,
    padded_target,
    predict_reaction_centers,
    rank_by_frequency,
    read_reactions,
    topk_metrics,
    write_reactions,
)
from .steering import RESAMPLE_MODES, RESAMPLE_STREAM, SteeringConfig, greedy_batch, smc_batch

log = logging.getLogger(__name__)

MODES = ("rpf", "rsf", "rpf-rs", "rsf-rs", "greedy")
CONDITIONINGS = ("product", "synthon")
OUTPUT_ENV = "RETROFLOW_OUTPUT_DIR"
BUNDLE_VERSION = 1
METRICS = ("exact", "round_trip", "coverage")


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_json(path) -> dict:
    with open(path) as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a JSON object")
    return d


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- configs ------------------------------------------------------------------

@dataclass
class DataConfig:
    output: str | None = None
    seed: int = 0
    n_train: int = 2000
    n_valid: int = 100
    n_test: int = 500
    min_fragment: int = 2
    max_fragment: int = 5
    ring_prob: float = 0.6
    double_bond_prob: float = 0.2
    multi_answer_fraction: float = 0.5
    dummy_count: int = 10

    def generator(self) -> GeneratorConfig:
        d = dataclasses.asdict(self)
        d.pop("output"), d.pop("seed")
        try:
            return GeneratorConfig(**d)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        cfg = _from_dict(cls, d)
        cfg.generator()
        return cfg


@dataclass
class TrainConfig:
    dataset: str = ""
    output: str | None = None
    seed: int = 0
    dummy_count: int = 10
    epochs: int = 30
    lr: float = 0.3
    lambda_edge: float = 2.0
    batch_size: int = 1024
    samples_per_pair: int = 4
    conditionings: list = field(default_factory=lambda: list(CONDITIONINGS))
    max_reactions: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.samples_per_pair < 1:
            raise ConfigError("epochs, batch_size and samples_per_pair must be positive")
        if self.lr < 0 or self.lambda_edge < 0:
            raise ConfigError("lr and lambda_edge must be non-negative")
        if self.dummy_count < 2:
            raise ConfigError("dummy_count must be at least 2")
        bad = set(self.conditionings) - set(CONDITIONINGS)
        if bad or not self.conditionings:
            raise ConfigError(f"conditionings must be drawn from {CONDITIONINGS}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)


@dataclass
class ExperimentConfig:
    mode: str = "rpf"
    T: int = 50
    N: int = 100
    K: int = 4
    lam: float = 1.0
    M: int = 2
    budgets: list = field(default_factory=lambda: [70, 30])
    stepper: str = "euler"
    dummy_count: int = 10
    dataset: str = ""
    model: str = ""
    seed: int = 0
    output: str | None = None
    resample_mode: str = "every-step"
    ess_fraction: float = 0.5
    estimate: str = "mode"
    ks: list = field(default_factory=lambda: [1, 3, 5, 10])
    max_products: int | None = None
    dump_predictions: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.stepper not in STEPPERS:
            raise ConfigError(f"stepper must be one of {STEPPERS}")
        if min(self.T, self.N, self.K, self.M) < 1:
            raise ConfigError("T, N, K and M must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.resample_mode not in RESAMPLE_MODES or not 0 < self.ess_fraction <= 1:
            raise ConfigError("invalid resampling settings")
        if self.estimate not in ESTIMATES:
            raise ConfigError(f"estimate must be one of {ESTIMATES}")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("ks must be positive integers")
        if self.dummy_count < 2:
            raise ConfigError("dummy_count must be at least 2")
        if self.max_products is not None and self.max_products < 1:
            raise ConfigError("max_products must be positive")
        self.budgets = [int(b) for b in self.budgets]
        self.ks = sorted(int(k) for k in self.ks)
        if self.mode in ("rsf", "rsf-rs"):
            if len(self.budgets) != self.M or min(self.budgets) < 1:
                raise ConfigError("need one positive budget per synthon candidate")
            if sum(self.budgets) != self.N:
                raise ConfigError(f"budgets {self.budgets} do not sum to N={self.N}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_dict(cls, d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    @property
    def steering(self) -> SteeringConfig:
        return SteeringConfig(self.K, self.lam, self.resample_mode, self.ess_fraction, self.stepper,
                               self.estimate)


# -- data -------------------------------------------------------------------

def generate_data(cfg: DataConfig) -> dict[str, list[Reaction]]:
    data = generate_dataset(cfg.generator(), RandomStream(cfg.seed))
    if cfg.output is not None:
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        for split, rxns in data.items():
            write_reactions(out / f"{split}.jsonl", rxns)
        dump_json(dataclasses.asdict(cfg) | {"output": None}, out / "config.json")
    return data


def load_split(dataset, split: str) -> list[Reaction]:
    path = Path(dataset)
    if path.is_dir():
        path = path / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file {path}")
    return read_reactions(path)


# -- conditioning -------------------------------------------------------------

def source_graph(reaction_or_product, conditioning: str, center=None) -> AttributedGraph:
    product = getattr(reaction_or_product, "product", reaction_or_product)
    if conditioning == "product":
        return product
    if center is None:
        center = reaction_or_product.bridge
    return derive_synthons(product, center)


def conditioning_inputs(product: AttributedGraph, src: AttributedGraph, conditioning: str, dummy_count: int):
    """Flat source tokens, node count and featurizer context for one product."""
    n = product.n + dummy_count
    x0 = flatten(pad_with_dummies(src, dummy_count)).tokens
    prod = flatten(pad_with_dummies(product, dummy_count)).tokens if conditioning == "synthon" else None
    return x0, n, GraphFeaturizer.static_context(x0, n, prod)


def training_groups(reactions, conditioning: str, dummy_count: int) -> list[TrainingGroup]:
    """Pairs grouped by padded graph size, with stacked featurizer context."""
    by_size = defaultdict(list)
    for r in reactions:
        x0, n, ctx = conditioning_inputs(r.product, source_graph(r, conditioning), conditioning, dummy_count)
        x1 = flatten(padded_target(r, dummy_count)).tokens
        by_size[n].append((x0, x1, ctx))
    groups = []
    for n, items in sorted(by_size.items()):
        x0 = np.stack([a for a, _, _ in items])
        x1 = np.stack([b for _, b, _ in items])
        ctx = {k: np.stack([c[k] for _, _, c in items]) for k in items[0][2]}
        groups.append(TrainingGroup(CouplingDataset(x0, x1, graph_vocab(n, 6, 3), n_nodes=n), ctx))
    return groups


# -- training -----------------------------------------------------------------

@dataclass
class ModelBundle:
    models: dict
    dummy_count: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"version": BUNDLE_VERSION, "dummy_count": self.dummy_count, "meta": self.meta,
                "models": {k: m.to_dict() for k, m in sorted(self.models.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        if d.get("version") != BUNDLE_VERSION:
            raise ValueError(f"unsupported model bundle version {d.get('version')}")
        return cls({k: TabularDenoiser.from_dict(m) for k, m in d["models"].items()},
                   d["dummy_count"], d.get("meta", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def get(self, conditioning: str) -> TabularDenoiser:
        if conditioning not in self.models:
            raise KeyError(f"model bundle has no {conditioning!r} model")
        return self.models[conditioning]


def train_models(cfg: TrainConfig, reactions: list[Reaction] | None = None) -> ModelBundle:
    if reactions is None:
        reactions = load_split(cfg.dataset, "train")
    if cfg.max_reactions is not None:
        reactions = reactions[: cfg.max_reactions]
    models = {}
    for ci, cond in enumerate(cfg.conditionings):
        groups = training_groups(reactions, cond, cfg.dummy_count)
        models[cond] = train_tabular(
            groups, epochs=cfg.epochs, lr=cfg.lr, lambda_edge=cfg.lambda_edge,
            rng=RandomStream(cfg.seed).child(ci), featurizer=GraphFeaturizer(),
            batch_size=cfg.batch_size, samples_per_pair=cfg.samples_per_pair,
        )
        log.info("trained %s model: final loss %.4f", cond, models[cond].meta["curve"][-1])
    bundle = ModelBundle(models, cfg.dummy_count, {"n_reactions": len(reactions), "seed": cfg.seed})
    if cfg.output is not None:
        Path(cfg.output).parent.mkdir(parents=True, exist_ok=True)
        bundle.save(cfg.output)
    return bundle


# -- sampling -----------------------------------------------------------------

class ProductSampler:
    """All sampling for one product and one synthon group, with shared trajectories."""

    def __init__(self, model: TabularDenoiser, product: AttributedGraph, src: AttributedGraph,
                 conditioning: str, dummy_count: int, grid: TimeGrid, stepper: str,
                 stream: RandomStream, oracle: RewardOracle):
        self.x0, self.n, ctx = conditioning_inputs(product, src, conditioning, dummy_count)
        self.den = model.bind(ctx, graph_vocab(self.n, 6, 3))
        self.grid, self.stepper, self.stream, self.oracle = grid, stepper, stream, oracle
        self._plain = np.empty((0, self.x0.size), dtype=np.int64)

    def _streams(self, slots) -> StreamBatch:
        return StreamBatch.of([self.stream.child(int(s)) for s in slots])

    def plain(self, count: int) -> np.ndarray:
        """Terminal states of trajectory slots ``0 .. count - 1`` (cached and extended)."""
        have = len(self._plain)
        if count > have:
            slots = np.arange(have, count)
            x0 = np.broadcast_to(self.x0, (slots.size, self.x0.size))
            new = simulate_batch(x0, self.den, self.grid, self.stepper, self._streams(slots))
            self._plain = np.concatenate([self._plain, new])
        return self._plain[:count]

    def greedy(self, runs: int, K: int) -> np.ndarray:
        xs = self.plain(runs * K)
        r = self.oracle(xs).reshape(runs, K)
        best = r.argmax(axis=1)
        return xs.reshape(runs, K, -1)[np.arange(runs), best]

    def smc(self, runs: int, cfg: SteeringConfig) -> np.ndarray:
        if cfg.K == 1:
            return self.plain(runs)
        parts = self._streams(np.arange(runs * cfg.K))
        res = StreamBatch.of([self.stream.child(RESAMPLE_STREAM, i) for i in range(runs)])
        out = smc_batch(self.x0, self.den, self.oracle, self.grid, cfg, parts, res)
        return out.output


def product_stream(seed: int, index: int, group: int) -> RandomStream:
    return RandomStream(seed).child(index, group)


def synthon_plan(product: AttributedGraph, M: int, budgets) -> list[tuple[tuple[int, int], int]]:
    """Top-``M`` centres with their sample budgets.

    When fewer than ``M`` centres exist, the unused budgets go to the best
    centre so the total stays ``N``.
    """
    centres = [c for c, _ in predict_reaction_centers(product, M)]
    plan = [[c, int(b)] for c, b in zip(centres, budgets)]
    plan[0][1] += int(sum(budgets[len(centres):]))
    return [(c, b) for c, b in plan]


def predict_product(cfg: ExperimentConfig, bundle: ModelBundle, product: AttributedGraph, index: int,
                    oracle: RewardOracle | None = None) -> RankedPredictionSet:
    grid = TimeGrid(cfg.T)
    n = product.n + cfg.dummy_count
    oracle = oracle or RewardOracle(pad_with_dummies(product, cfg.dummy_count), n)
    if cfg.mode in ("rpf", "rpf-rs", "greedy"):
        sampler = ProductSampler(bundle.get("product"), product, product, "product", cfg.dummy_count,
                                 grid, cfg.stepper, product_stream(cfg.seed, index, 0), oracle)
        if cfg.mode == "rpf":
            xs = sampler.plain(cfg.N)
        elif cfg.mode == "greedy":
            xs = sampler.greedy(cfg.N, cfg.K)
        else:
            xs = sampler.smc(cfg.N, cfg.steering)
        return rank_by_frequency(xs, n)
    groups, budgets = [], []
    for g, (centre, budget) in enumerate(synthon_plan(product, cfg.M, cfg.budgets)):
        sampler = ProductSampler(bundle.get("synthon"), product, derive_synthons(product, centre), "synthon",
                                 cfg.dummy_count, grid, cfg.stepper, product_stream(cfg.seed, index, g), oracle)
        xs = sampler.plain(budget) if cfg.mode == "rsf" else sampler.smc(budget, cfg.steering)
        groups.append(rank_by_frequency(xs, n))
        budgets.append(budget)
    return merge_synthon_budgets(groups, budgets)


# -- evaluation -----------------------------------------------------------------

def _mean_metrics(records, ks) -> dict:
    out = {}
    for m in METRICS:
        out[m] = {str(k): float(np.mean([r[m][k] for r in records])) if records else 0.0 for k in ks}
    return out


def _dump_entry(pred: RankedPredictionSet, limit: int) -> list:
    return [{"reactants": g.to_dict(), "score": s} for g, s in pred.entries()[:limit]]


def run_experiment(cfg: ExperimentConfig, bundle: ModelBundle | None = None,
                   test: list[Reaction] | None = None) -> dict:
    """Evaluate one configuration over the test split; returns the report dict.

    When ``cfg.output`` is set, writes ``report.json``, ``metrics.csv``,
    ``timing.json`` and optionally ``predictions.jsonl`` there.
    """
    start = time.perf_counter()
    if bundle is None:
        if not cfg.model:
            raise ConfigError("no model checkpoint given")
        bundle = ModelBundle.load(cfg.model)
    if bundle.dummy_count != cfg.dummy_count:
        raise ConfigError(f"model was trained with dummy_count={bundle.dummy_count}, config has {cfg.dummy_count}")
    if test is None:
        test = load_split(cfg.dataset, "test")
    if cfg.max_products is not None:
        test = test[: cfg.max_products]
    records, dumps = [], []
    for i, rxn in enumerate(test):
        pred = predict_product(cfg, bundle, rxn.product, i)
        records.append(topk_metrics(pred, rxn, cfg.ks))
        if cfg.dump_predictions:
            dumps.append({"index": i, "candidates": _dump_entry(pred, max(cfg.ks))})
    report = {
        "config": cfg.to_dict(),
        "n_products": len(test),
        "metrics": _mean_metrics(records, cfg.ks),
        "per_product": {m: {str(k): [r[m][k] for r in records] for k in cfg.ks} for m in METRICS},
    }
    wall = time.perf_counter() - start
    if cfg.output is not None:
        write_report(report, Path(cfg.output), dumps if cfg.dump_predictions else None, wall)
    report["wall_time"] = wall
    return report


def write_report(report: dict, out: Path, dumps=None, wall: float | None = None):
    out.mkdir(parents=True, exist_ok=True)
    dump_json(report, out / "report.json")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", *METRICS])
        for k in report["config"]["ks"]:
            w.writerow([k, *(f"{report['metrics'][m][str(k)]:.6f}" for m in METRICS)])
    if dumps is not None:
        with open(out / "predictions.jsonl", "w") as fh:
            for d in dumps:
                fh.write(json.dumps(d, separators=(",", ":")) + "\n")
    if wall is not None:
        # Kept apart from the report so reports stay byte-identical across runs.
        dump_json({"wall_time": wall}, out / "timing.json")


# -- ablations ------------------------------------------------------------------

ABLATIONS = ("particles", "steps", "budget-split", "matched-compute")


def ablation_grid(name: str, base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    if name == "particles":
        return [(f"K={k}", base.replace(mode="rsf-rs", K=k)) for k in (1, 2, 4, 6, 8)]
    if name == "steps":
        return [(f"T={t}", base.replace(T=t)) for t in (5, 10, 25, 50, 100)]
    if name == "budget-split":
        return [(f"{a}/{base.N - a}", base.replace(mode="rsf", M=2, budgets=[a, base.N - a]))
                for a in (base.N * p // 100 for p in (50, 60, 70, 80, 90))]
    if name == "matched-compute":
        return [
            (f"rpf N={4 * base.N}", base.replace(mode="rpf", N=4 * base.N, K=1)),
            (f"greedy N={base.N} K=4", base.replace(mode="greedy", K=4)),
            (f"rpf-rs N={base.N} K=4", base.replace(mode="rpf-rs", K=4)),
        ]
    raise ConfigError(f"unknown ablation suite {name!r}; expected one of {ABLATIONS}")


def run_ablation_suite(name: str, base: ExperimentConfig, bundle: ModelBundle | None = None,
                       test: list[Reaction] | None = None, output: str | Path | None = None) -> list[dict]:
    """Run every configuration of a suite; returns one row per configuration."""
    grid = ablation_grid(name, base)
    if bundle is None:
        bundle = ModelBundle.load(base.model)
    if test is None:
        test = load_split(base.dataset, "test")
    rows = []
    for label, cfg in grid:
        rep = run_experiment(cfg.replace(output=None), bundle, test)
        row = {"suite": name, "setting": label, "mode": cfg.mode}
        for m in METRICS:
            for k in cfg.ks:
                row[f"{m}@{k}"] = round(rep["metrics"][m][str(k)], 6)
        rows.append(row)
    if output is not None:
        out = Path(output)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"ablation_{name}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        dump_json({"suite": name, "base": base.to_dict(), "rows": rows}, out / f"ablation_{name}.json")
    return rows


# -- multi-method benchmark ---------------------------------------------------------

def run_benchmark(base: ExperimentConfig, variants: dict[str, dict], bundle: ModelBundle,
                  test: list[Reaction], seeds) -> dict[str, np.ndarray]:
    """Per-seed mean metrics for several product-conditioned variants sharing trajectories.

    ``variants`` maps a name to overrides of ``mode``, ``N``, ``K`` and
    ``lam``. Returns ``{name: array (n_seeds, n_metrics, n_ks)}``.
    """
    seeds = list(seeds)
    cfgs = {name: base.replace(**v) for name, v in variants.items()}
    for c in cfgs.values():
        if c.mode not in ("rpf", "rpf-rs", "greedy"):
            raise ConfigError("benchmark variants must be product-conditioned")
    model = bundle.get("product")
    grid = TimeGrid(base.T)
    out = {name: np.zeros((len(seeds), len(METRICS), len(base.ks))) for name in cfgs}
    for si, seed in enumerate(seeds):
        for i, rxn in enumerate(test):
            n = rxn.product.n + base.dummy_count
            oracle = RewardOracle(pad_with_dummies(rxn.product, base.dummy_count), n)
            sampler = ProductSampler(model, rxn.product, rxn.product, "product", base.dummy_count, grid,
                                     base.stepper, product_stream(seed, i, 0), oracle)
            for name, c in cfgs.items():
                if c.mode == "rpf":
                    xs = sampler.plain(c.N)
                elif c.mode == "greedy":
                    xs = sampler.greedy(c.N, c.K)
                else:
                    xs = sampler.smc(c.N, c.steering)
                met = topk_metrics(rank_by_frequency(xs, n), rxn, base.ks)
                for mi, m in enumerate(METRICS):
                    out[name][si, mi] += [met[m][k] for k in base.ks]
        for name in cfgs:
            out[name][si] /= max(len(test), 1)
    return out
