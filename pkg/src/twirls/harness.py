"""Experiment runner: config parsing, train/eval over seeds, sweeps,
oversmoothing and robustness studies, and CSV/JSON emission.

Configs are single JSON documents validated against :data:`CONFIG_SCHEMA`.
Every CSV written here is a pure function of the config and seeds, so
re-running produces identical bytes. Wall time only appears in the JSON
report.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .data import Dataset, dataset_hash, gen_chains, gen_sbm, load_dataset, perturb_edges
from .model import TrainConfig, evaluate, init_params, train
from .penalty import KINDS, PenaltySpec
from .propagation import MODES, PROX, SCHEDULES, PropagationConfig, row_dispersion, sgc_step, unfold

logger = logging.getLogger(__name__)

SWEEP_AXES = ("prop_steps", "alpha", "T", "mlp_layers")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class ExperimentError(RuntimeError):
    """A module error raised while running a valid config (CLI exit code 3)."""


_NUM_OR_INF = {"anyOf": [{"type": "number"}, {"enum": ["inf", "Infinity"]}]}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ExperimentConfig",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset"],
    "properties": {
        "name": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "generator": {"enum": ["chains", "sbm"]},
                "params": {"type": "object"},
                "perturb": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["rate"],
                    "properties": {
                        "rate": {"type": "number", "minimum": 0, "maximum": 1},
                        "mode": {"enum": ["add", "remove", "mixed"]},
                        "seed": {"type": "integer"},
                    },
                },
            },
            "oneOf": [{"required": ["path"]}, {"required": ["generator"]}],
        },
        "propagation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 0},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "lam": {"type": "number", "minimum": 0},
                "mode": {"enum": list(MODES)},
                "prox": {"enum": list(PROX)},
                "attention_schedule": {"enum": list(SCHEDULES)},
                "attention": {
                    "anyOf": [
                        {"type": "null"},
                        {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["kind"],
                            "properties": {
                                "kind": {"enum": list(KINDS)},
                                "p": {"type": "number"},
                                "tau": {"type": "number"},
                                "T": _NUM_OR_INF,
                                "eps": {"type": "number"},
                            },
                        },
                    ]
                },
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "K": {"type": "integer", "minimum": 0},
                "L": {"type": "integer", "minimum": 0},
                "hidden": {"type": "integer", "minimum": 1},
                "embedding_dim": {"type": "integer", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number"},
                "weight_decay": {"type": "number"},
                "dropout": {"type": "number"},
                "epochs": {"type": "integer"},
                "beta1": {"type": "number"},
                "beta2": {"type": "number"},
                "eps": {"type": "number"},
                "attention_grad": {"enum": ["detached", "full"]},
                "selection": {"enum": ["best_val", "last"]},
            },
        },
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "outputs": {"type": "string"},
    },
}


@dataclass
class ModelConfig:
    K: int = 1
    L: int = 0
    hidden: int = 64
    embedding_dim: int = 0


@dataclass
class ExperimentConfig:
    dataset: dict
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list = field(default_factory=lambda: [0])
    outputs: str | None = None
    name: str = "experiment"
    source: str | None = None  # file the config was read from, for error context

    def to_dict(self) -> dict:
        """Resolved, JSON-safe form that :func:`parse_config` accepts back."""
        prop = asdict(self.propagation)
        prop.pop("record_trace")
        prop.pop("tol")
        prop["attention"] = self.propagation.attention.to_dict() if self.propagation.attention else None
        tr = asdict(self.train)
        tr.pop("seed")
        out = {"name": self.name, "dataset": copy.deepcopy(self.dataset), "propagation": prop,
               "model": asdict(self.model), "train": tr, "seeds": list(self.seeds)}
        if self.outputs is not None:
            out["outputs"] = self.outputs
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return ExperimentConfig(**d)


def parse_config(doc: dict, source: str | None = None) -> ExperimentConfig:
    """Validate a config document and build an :class:`ExperimentConfig`."""
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{source or 'config'}: {where}: {e.message}") from None
    try:
        prop = dict(doc.get("propagation", {}))
        att = prop.pop("attention", None)
        prop["attention"] = PenaltySpec.from_dict(att) if att is not None else None
        prop_cfg = PropagationConfig(**prop)
        model = ModelConfig(**doc.get("model", {}))
        train_cfg = TrainConfig(**doc.get("train", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source or 'config'}: {e}") from None
    return ExperimentConfig(dataset=copy.deepcopy(doc["dataset"]), propagation=prop_cfg, model=model,
                            train=train_cfg, seeds=list(doc.get("seeds", [0])),
                            outputs=doc.get("outputs"), name=doc.get("name", "experiment"),
                            source=source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    cfg = parse_config(doc, str(path))
    if "path" in cfg.dataset and not Path(cfg.dataset["path"]).is_absolute():
        cfg.dataset["path"] = str((path.parent / cfg.dataset["path"]).resolve())
    return cfg


# ----------------------------------------------------------------- datasets

def _generate(spec: dict, seed: int) -> Dataset:
    params = dict(spec.get("params", {}))
    params.setdefault("seed", seed)
    gen = {"chains": gen_chains, "sbm": gen_sbm}[spec["generator"]]
    try:
        return gen(**params)
    except TypeError as e:
        raise ConfigError(f"bad {spec['generator']} generator params: {e}") from None


def build_dataset(spec: dict, seed: int) -> Dataset:
    """Load or generate the dataset for one seed, then apply any perturbation.

    Generator params without an explicit ``seed`` use the run seed, so each
    seed sees a fresh sample of the synthetic family.
    """
    if "path" in spec:
        ds = load_dataset(spec["path"])
    else:
        ds = _generate(spec, seed)
    pert = spec.get("perturb")
    if pert and pert["rate"] > 0:
        g = perturb_edges(ds.graph, pert["rate"], pert.get("mode", "mixed"), pert.get("seed", seed))
        ds = ds.with_graph(g)
    return ds


def content_hash(ds: Dataset) -> str:
    """sha256 over the arrays that define a dataset."""
    h = hashlib.sha256()
    for a in (ds.graph.edges, ds.features, ds.labels, ds.train, ds.val, ds.test):
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _dataset_digest(cfg: ExperimentConfig, datasets: list[Dataset]) -> str:
    if "path" in cfg.dataset:
        return dataset_hash(cfg.dataset["path"])
    h = hashlib.sha256()
    for ds in datasets:
        h.update(content_hash(ds).encode())
    return h.hexdigest()


# ------------------------------------------------------------- single runs

def _context(cfg: ExperimentConfig, seed: int, e: Exception) -> ExperimentError:
    where = cfg.source or cfg.name
    return ExperimentError(f"{where} (seed {seed}): {type(e).__name__}: {e}")


def train_one(cfg: ExperimentConfig, ds: Dataset, seed: int, prop: PropagationConfig | None = None,
              propagated=None) -> dict:
    """Train and evaluate one model. Returns metrics plus the epoch curve.

    With ``propagated`` features the model is a linear classifier on them.
    """
    prop = cfg.propagation if prop is None else prop
    m = cfg.model
    K, L = (0, 1) if propagated is not None else (m.K, m.L)
    d_in = propagated.shape[1] if propagated is not None else ds.features.shape[1]
    params = init_params(d_in, ds.num_classes, K=K, L=L, hidden=m.hidden, seed=seed,
                         num_nodes=ds.graph.num_nodes, embedding_dim=m.embedding_dim)
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed})
    best, history = train(params, ds, prop, tcfg, propagated=propagated)
    test = evaluate(best, ds, "test", prop, propagated=propagated)
    return {"seed": seed, "test_accuracy": test["accuracy"], "test_macro_f1": test["macro_f1"],
            "curve": history}


def _pstdev(xs) -> float:
    return float(np.std(np.asarray(xs, dtype=float))) if len(xs) else float("nan")


def summarize(runs: list[dict]) -> dict:
    acc = [r["test_accuracy"] for r in runs]
    f1 = [r["test_macro_f1"] for r in runs]
    return {"accuracy_mean": float(np.mean(acc)), "accuracy_std": _pstdev(acc),
            "macro_f1_mean": float(np.mean(f1)), "macro_f1_std": _pstdev(f1), "num_seeds": len(runs)}


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header: list[str], rows: list[list]) -> str:
    """Write rows with fixed formatting; returns the text written."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text


RESULT_HEADER = ["seed", "test_accuracy", "test_macro_f1", "epochs", "final_train_loss"]


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> dict:
    """Train once per seed and aggregate.

    Writes ``report.json`` (resolved config, dataset hash, per-seed results
    with epoch curves, summary, wall time) and ``results.csv`` into
    ``cfg.outputs`` when it is set and ``write`` is true.
    """
    t0 = time.perf_counter()
    runs, datasets = [], []
    for seed in cfg.seeds:
        try:
            ds = build_dataset(cfg.dataset, seed)
            datasets.append(ds)
            runs.append(train_one(cfg, ds, seed))
        except ConfigError:
            raise
        except (ValueError, RuntimeError, OSError, FloatingPointError) as e:
            raise _context(cfg, seed, e) from e
        logger.info("%s seed %d: test accuracy %.4f", cfg.name, seed, runs[-1]["test_accuracy"])
    report = {"config": cfg.to_dict(), "dataset_hash": _dataset_digest(cfg, datasets),
              "runs": runs, "summary": summarize(runs)}
    rows = [[r["seed"], r["test_accuracy"], r["test_macro_f1"], len(r["curve"]), r["curve"][-1]["loss"]]
            for r in runs]
    report["csv"] = write_csv(None, RESULT_HEADER, rows)
    report["wall_time_s"] = time.perf_counter() - t0
    if write and cfg.outputs:
        out = Path(cfg.outputs)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(report["csv"], encoding="utf-8")
        doc = {k: v for k, v in report.items() if k != "csv"}
        (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n",
                                         encoding="utf-8")
    return report


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


# ------------------------------------------------------------------ sweeps

def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Config with one sweep axis set to ``value``.

    ``mlp_layers`` sets the input MLP depth K when the model has one, and the
    output MLP depth L otherwise.
    """
    prop = cfg.propagation
    if axis == "prop_steps":
        if float(value) != int(value):
            raise ConfigError(f"prop_steps must be an integer, got {value}")
        return cfg.replace(propagation=_prop_replace(prop, steps=int(value)))
    if axis == "alpha":
        return cfg.replace(propagation=_prop_replace(prop, alpha=float(value)))
    if axis == "T":
        if prop.attention is None:
            raise ConfigError("sweeping T needs an attention penalty in the config")
        d = prop.attention.to_dict()
        d["T"] = value
        try:
            spec = PenaltySpec.from_dict(d)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return cfg.replace(propagation=_prop_replace(prop, attention=spec))
    if axis == "mlp_layers":
        layers = int(value)
        model = ModelConfig(**asdict(cfg.model))
        if model.K > 0:
            model.K = layers
        else:
            model.L = layers
        return cfg.replace(model=model)
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def _prop_replace(prop: PropagationConfig, **changes) -> PropagationConfig:
    d = {k: getattr(prop, k) for k in prop.__dataclass_fields__}
    d.update(changes)
    try:
        return PropagationConfig(**d)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def sweep(cfg: ExperimentConfig, axis, values, write: bool = True) -> str:
    """One run_experiment per value (or per grid cell); long-format CSV.

    ``axis`` is a name, or a list of names swept as a full grid, in which
    case ``values`` is a matching list of value lists. Columns are the axis
    names followed by ``seed, metric, value``; row order is the grid order,
    then seed, then metric.
    """
    axes = [axis] if isinstance(axis, str) else list(axis)
    grids = [values] if isinstance(axis, str) else list(values)
    if len(axes) != len(grids):
        raise ConfigError("need one value list per sweep axis")
    for a, vs in zip(axes, grids):
        if a not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {a!r}; expected one of {SWEEP_AXES}")
        if len(vs) == 0:
            raise ConfigError(f"no values given for sweep axis {a!r}")
    rows = []
    for cell in _product(grids):
        sub = cfg
        for a, v in zip(axes, cell):
            sub = apply_axis(sub, a, v)
        report = run_experiment(sub, write=False)
        for r in report["runs"]:
            for metric in ("test_accuracy", "test_macro_f1"):
                rows.append(list(cell) + [r["seed"], metric, r[metric]])
    text = write_csv(None, axes + ["seed", "metric", "value"], rows)
    if write and cfg.outputs:
        Path(cfg.outputs).mkdir(parents=True, exist_ok=True)
        (Path(cfg.outputs) / "sweep.csv").write_text(text, encoding="utf-8")
    return text


def _product(grids):
    if not grids:
        yield ()
        return
    for v in grids[0]:
        for rest in _product(grids[1:]):
            yield (v,) + rest


# ----------------------------------------------------------- oversmoothing

def log_grid(max_steps: int) -> list[int]:
    """Powers of two below ``max_steps`` followed by ``max_steps`` itself."""
    if max_steps < 1:
        raise ConfigError("max_steps must be >= 1")
    grid, s = [], 1
    while s < max_steps:
        grid.append(s)
        s *= 2
    return grid + [max_steps]


def sgc_features(ds: Dataset, steps: int) -> np.ndarray:
    Z = ds.features
    for _ in range(steps):
        Z = sgc_step(ds.graph, Z)
    return Z


def compare_oversmoothing(cfg: ExperimentConfig, max_steps: int | None = None, grid=None,
                          write: bool = True) -> list[dict]:
    """Unfolded model vs SGC-style propagation over a grid of step counts.

    The SGC route applies ``sgc_step`` S times to the raw features and fits a
    linear classifier. Dispersion columns measure the parameter-free
    propagation of the raw features: unfolded iterates directly, SGC
    iterates mapped back by ``(D + I)^{-1/2}`` so that both live on the same
    scale (the GCN reparameterization at lam = 1).
    """
    grid = list(grid) if grid is not None else log_grid(int(max_steps))
    rows = []
    for seed in cfg.seeds:
        try:
            ds = build_dataset(cfg.dataset, seed)
        except ConfigError:
            raise
        except (ValueError, OSError) as e:
            raise _context(cfg, seed, e) from e
        scale = 1.0 / np.sqrt(ds.graph.degree + 1.0)
        for S in grid:
            prop = _prop_replace(cfg.propagation, steps=int(S))
            try:
                unf = train_one(cfg, ds, seed, prop)
                Z = sgc_features(ds, int(S))
                sgc = train_one(cfg, ds, seed, prop, propagated=Z)
                disp_u = row_dispersion(unfold(ds.graph, ds.features, prop).final)
            except (ValueError, RuntimeError) as e:
                raise _context(cfg, seed, e) from e
            rows.append({"steps": int(S), "seed": seed,
                         "unfolded_accuracy": unf["test_accuracy"], "sgc_accuracy": sgc["test_accuracy"],
                         "unfolded_dispersion": disp_u, "sgc_dispersion": row_dispersion(Z * scale[:, None])})
    header = ["steps", "seed", "unfolded_accuracy", "sgc_accuracy", "unfolded_dispersion", "sgc_dispersion"]
    text = write_csv(None, header, [[r[h] for h in header] for r in rows])
    if write and cfg.outputs:
        Path(cfg.outputs).mkdir(parents=True, exist_ok=True)
        (Path(cfg.outputs) / "oversmoothing.csv").write_text(text, encoding="utf-8")
    return rows


def mean_by(rows: list[dict], key: str, value: str) -> dict:
    """Average ``value`` over rows sharing ``key``, in first-seen order."""
    out: dict = {}
    for r in rows:
        out.setdefault(r[key], []).append(r[value])
    return {k: float(np.mean(v)) for k, v in out.items()}


# -------------------------------------------------------------- robustness

def robustness_study(cfg: ExperimentConfig, rates, write: bool = True) -> list[dict]:
    """Attention model vs base model on randomly perturbed graphs.

    The base model is the same config with attention removed. Each seed
    perturbs its own dataset sample with ``mixed`` edge flips.
    """
    if cfg.propagation.attention is None:
        raise ConfigError("robustness study needs an attention penalty in the config")
    rates = [float(r) for r in rates]
    if not rates or any(not 0 <= r <= 1 for r in rates):
        raise ConfigError("rates must be a non-empty list of values in [0, 1]")
    base_prop = _prop_replace(cfg.propagation, attention=None)
    rows = []
    for rate in rates:
        spec = {k: v for k, v in cfg.dataset.items() if k != "perturb"}
        if rate > 0:
            spec["perturb"] = {"rate": rate, "mode": cfg.dataset.get("perturb", {}).get("mode", "mixed")}
        for seed in cfg.seeds:
            try:
                ds = build_dataset(spec, seed)
                for model, prop in (("attention", cfg.propagation), ("base", base_prop)):
                    r = train_one(cfg, ds, seed, prop)
                    rows.append({"rate": rate, "seed": seed, "model": model,
                                 "test_accuracy": r["test_accuracy"], "test_macro_f1": r["test_macro_f1"]})
            except ConfigError:
                raise
            except (ValueError, RuntimeError) as e:
                raise _context(cfg, seed, e) from e
    header = ["rate", "seed", "model", "test_accuracy", "test_macro_f1"]
    text = write_csv(None, header, [[r[h] for h in header] for r in rows])
    if write and cfg.outputs:
        Path(cfg.outputs).mkdir(parents=True, exist_ok=True)
        (Path(cfg.outputs) / "robustness.csv").write_text(text, encoding="utf-8")
    return rows


def parse_values(text: str) -> list:
    """Comma-separated numbers; ``inf`` allowed."""
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            v = float(tok)
        except ValueError:
            raise ConfigError(f"not a number: {tok!r}") from None
        out.append(int(v) if v.is_integer() and "." not in tok and "e" not in tok.lower() else v)
    if not out:
        raise ConfigError("empty value list")
    return out

