"""Configuration and the stage runners behind the command line.

Every stage reads its inputs from, and writes its outputs to, one output
directory:

    data/                       features.csv, labels_<task>.csv, dataset.json
    affinity_raw.csv            mean L1 distances
    affinity_normalized.csv     row-normalised SCA affinities
    affinity.json
    embeddings.csv              GAT embeddings Z of the selected run
    embed.json
    grouping.json
    performance.json            SCA grouping, trained per group
    random_performance.json     random-grouping baseline
    loss_curves.tsv
    oracle.json                 exhaustive search over partitions
    summary.json, plot_data.tsv, figures/*.png
    timings.json                wall-clock seconds per stage

Stage seeds are ``derive_seed(master_seed, stage, run)``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import plotting
from .grouping import DEFAULT_RUNS, DEFAULT_THRESHOLD, grouping_run, run_seed, select_grouping
from .harness import ORACLE_MAX_TASKS, TrainConfig, evaluate_groupings, exhaustive_oracle, random_groupings
from .numcore import SeededRng, derive_seed
from .reports import (
    InputFileError,
    config_hash,
    curves_rows,
    read_json,
    write_json,
    write_matrix_csv,
    write_tsv,
)
from .sca import DEFAULT_ETA, DEFAULT_N_SAMPLES, MODES, AffinityMatrix, build_affinity_matrix
from .synthdata import PlantedSpec, generate_planted, load_dataset, save_dataset, split
from .taskgraph import GatConfig
from .taskmodels import ModelArch, init_shared

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ArchParams:
    trunk_sizes: tuple[int, ...] = (16,)
    head_sizes: tuple[int, ...] = ()
    activation: str = "tanh"
    trunk_bias: bool = True

    def build(self, input_dim: int, kinds) -> ModelArch:
        return ModelArch(input_dim, tuple(self.trunk_sizes), tuple(kinds), tuple(self.head_sizes), self.activation, self.trunk_bias)


@dataclass
class ScaParams:
    eta: float = DEFAULT_ETA
    n_samples: int = DEFAULT_N_SAMPLES
    mode: str = "vector"


@dataclass
class GroupingParams:
    budget: int = 2
    threshold: float = DEFAULT_THRESHOLD
    runs: int = DEFAULT_RUNS


@dataclass
class BaselineParams:
    random: bool = True
    oracle: bool = False


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass
class PipelineConfig:
    seed: int = 0
    planted: PlantedSpec = field(default_factory=PlantedSpec)
    data_dir: str | None = None
    arch: ArchParams = field(default_factory=ArchParams)
    sca: ScaParams = field(default_factory=ScaParams)
    gat: GatConfig = field(default_factory=GatConfig)
    grouping: GroupingParams = field(default_factory=GroupingParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    baselines: BaselineParams = field(default_factory=BaselineParams)
    out: str = "results"

    def validate(self) -> "PipelineConfig":
        if self.sca.mode not in MODES:
            raise ConfigError(f"sca.mode must be one of {MODES}, got {self.sca.mode!r}")
        if not self.sca.eta > 0:
            raise ConfigError("sca.eta must be positive")
        if self.sca.n_samples < 1:
            raise ConfigError("sca.n_samples must be at least 1")
        if self.grouping.budget < 2:
            raise ConfigError("grouping.budget must be at least 2")
        if self.grouping.runs < 1:
            raise ConfigError("grouping.runs must be at least 1")
        if not 0 < self.grouping.threshold <= 1:
            raise ConfigError("grouping.threshold must lie in (0, 1]")
        if self.gat.epochs < 0 or not self.gat.learning_rate > 0 or self.gat.heads < 1:
            raise ConfigError("gat needs epochs >= 0, learning_rate > 0 and heads >= 1")
        return self

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "planted": self.planted.to_dict(),
            "data_dir": self.data_dir,
            "arch": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.arch).items()},
            "sca": asdict(self.sca),
            "gat": self.gat.to_dict(),
            "grouping": asdict(self.grouping),
            "train": self.train.to_dict(),
            "baselines": asdict(self.baselines),
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(
                seed=int(d.get("seed", 0)),
                planted=PlantedSpec.from_dict(d["planted"]) if "planted" in d else PlantedSpec(),
                data_dir=d.get("data_dir"),
                arch=ArchParams(**_tuples(d.get("arch", {}))),
                sca=ScaParams(**d.get("sca", {})),
                gat=GatConfig(**d.get("gat", {})),
                grouping=GroupingParams(**d.get("grouping", {})),
                train=TrainConfig(**d.get("train", {})),
                baselines=BaselineParams(**d.get("baselines", {})),
                out=d.get("out", "results"),
            ).validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)


# ---------------------------------------------------------------------------
# helpers


def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.data_dir) if cfg.data_dir else _out(cfg) / "data"


def _record_time(cfg: PipelineConfig, stage: str, seconds: float):
    path = _out(cfg) / "timings.json"
    timings = json.loads(path.read_text()) if path.exists() else {}
    timings[stage] = round(seconds, 6)
    write_json(path, timings, cfg.hash())


def load_data(cfg: PipelineConfig):
    directory = _data_dir(cfg)
    if not (directory / "dataset.json").exists():
        raise InputFileError(f"no dataset at {directory}; run the generate stage or pass --data")
    try:
        return load_dataset(directory)
    except (ValueError, OSError) as exc:
        raise InputFileError(f"cannot read dataset in {directory}: {exc}") from exc


def data_splits(cfg: PipelineConfig, dataset):
    return split(dataset, cfg.planted.split_fractions, SeededRng(derive_seed(cfg.seed, "split")))


def sca_model(cfg: PipelineConfig, dataset):
    arch = cfg.arch.build(dataset.input_dim, dataset.task_kinds)
    return init_shared(arch, SeededRng(derive_seed(cfg.seed, "init")))


def train_config(cfg: PipelineConfig) -> TrainConfig:
    return replace(cfg.train, seed=derive_seed(cfg.seed, "train"))


def gat_config(cfg: PipelineConfig) -> GatConfig:
    return replace(cfg.gat, seed=0)


def load_affinity(cfg: PipelineConfig) -> AffinityMatrix:
    return AffinityMatrix.from_dict(read_json(_out(cfg) / "affinity.json"))


def load_grouping(cfg: PipelineConfig) -> dict:
    d = read_json(_out(cfg) / "grouping.json")
    if "cluster_indices" not in d:
        raise InputFileError(f"{_out(cfg) / 'grouping.json'}: missing field 'cluster_indices'")
    return d


# ---------------------------------------------------------------------------
# stages


def stage_generate(cfg: PipelineConfig) -> Path:
    spec = replace(cfg.planted, seed=derive_seed(cfg.seed, "data"))
    dataset, groups = generate_planted(spec)
    directory = save_dataset(dataset, _data_dir(cfg), groups)
    manifest = directory / "dataset.json"
    write_json(manifest, json.loads(manifest.read_text()), cfg.hash())
    return directory


def stage_affinity(cfg: PipelineConfig) -> AffinityMatrix:
    dataset, _ = load_data(cfg)
    train, _, _ = data_splits(cfg, dataset)
    model = sca_model(cfg, train)
    if cfg.sca.n_samples > len(train):
        raise ConfigError(f"n_samples={cfg.sca.n_samples} exceeds the {len(train)} training rows")
    A = build_affinity_matrix(model, train, cfg.sca.n_samples, cfg.sca.eta, cfg.sca.mode, SeededRng(derive_seed(cfg.seed, "sca")))
    out = _out(cfg)
    h = cfg.hash()
    write_matrix_csv(out / "affinity_raw.csv", A.raw, A.task_names)
    write_matrix_csv(out / "affinity_normalized.csv", A.normalized, A.task_names)
    write_json(out / "affinity.json", A.to_dict(), h)
    return A


def stage_embed(cfg: PipelineConfig, run: int = 0):
    A = load_affinity(cfg)
    res = grouping_run(A, cfg.grouping.budget, run_seed(cfg.seed, run), run, gat_config(cfg), cfg.grouping.threshold)
    _write_embeddings(cfg, res, A)
    return res


def _write_embeddings(cfg, res, A):
    out = _out(cfg)
    Z = res.embeddings
    cols = [f"z{k}" for k in range(Z.shape[1])]
    write_matrix_csv(out / "embeddings.csv", Z, A.task_names, cols)
    write_json(
        out / "embed.json",
        {
            "run_index": res.run_index,
            "seed": res.seed,
            "gat": gat_config(cfg).to_dict(),
            "initial_loss": res.gat_losses[0],
            "final_loss": res.gat_losses[-1],
            "losses": list(res.gat_losses),
            "shape": list(Z.shape),
        },
        cfg.hash(),
    )


def stage_group(cfg: PipelineConfig):
    A = load_affinity(cfg)
    best = select_grouping(A, cfg.grouping.budget, cfg.grouping.runs, cfg.seed, gat_config(cfg), cfg.grouping.threshold)
    payload = best.to_dict()
    payload["budget"] = cfg.grouping.budget
    payload["threshold"] = cfg.grouping.threshold
    payload["runs"] = cfg.grouping.runs
    payload["log_likelihood"] = best.log_likelihood
    write_json(_out(cfg) / "grouping.json", payload, cfg.hash())
    _write_embeddings(cfg, best, A)
    return best


def stage_train(cfg: PipelineConfig):
    dataset, _ = load_data(cfg)
    train, val, test = data_splits(cfg, dataset)
    arch = cfg.arch.build(dataset.input_dim, dataset.task_kinds)
    tcfg = train_config(cfg)
    grouping = load_grouping(cfg)
    cache = {}
    rep = evaluate_groupings(grouping["cluster_indices"], train, val, test, arch, tcfg, cache)
    out = _out(cfg)
    h = cfg.hash()
    write_json(out / "performance.json", {**rep.to_dict(include_timings=False), "mode": tcfg.mode}, h)
    rows = list(curves_rows(rep.curves, "sca"))
    reports = {"sca": rep}
    if cfg.baselines.random and cfg.grouping.budget <= dataset.n_tasks:
        groups = random_groupings(dataset.n_tasks, cfg.grouping.budget, SeededRng(derive_seed(cfg.seed, "random")))
        rnd = evaluate_groupings(groups, train, val, test, arch, tcfg, cache)
        write_json(out / "random_performance.json", {**rnd.to_dict(include_timings=False), "mode": tcfg.mode}, h)
        rows += list(curves_rows(rnd.curves, "random"))
        reports["random"] = rnd
    write_tsv(out / "loss_curves.tsv", ["grouping", "group", "epoch", "loss"], rows)
    return reports


def stage_oracle(cfg: PipelineConfig):
    dataset, _ = load_data(cfg)
    if dataset.n_tasks > ORACLE_MAX_TASKS:
        raise ConfigError(
            f"the exhaustive oracle supports at most {ORACLE_MAX_TASKS} tasks; this dataset has {dataset.n_tasks}"
        )
    train, val, test = data_splits(cfg, dataset)
    arch = cfg.arch.build(dataset.input_dim, dataset.task_kinds)
    res = exhaustive_oracle(range(dataset.n_tasks), cfg.grouping.budget, train, val, test, arch, train_config(cfg))
    names = dataset.task_names
    payload = {
        "budget": cfg.grouping.budget,
        "best": [[names[i] for i in g] for g in res.best],
        "best_indices": res.best,
        "best_score": res.best_score,
        "n_candidates": len(res.table),
        "table": [
            {"partition": [[names[i] for i in g] for g in part], "partition_indices": part, "collective": score}
            for part, score in res.table
        ],
    }
    write_json(_out(cfg) / "oracle.json", payload, cfg.hash())
    return res


def stage_report(cfg: PipelineConfig) -> dict:
    """Merge whatever stage outputs exist into summary.json, plot_data.tsv and figures."""
    out = _out(cfg)
    summary = {"config": cfg.to_dict(), "stages": {}}
    summary["config"].pop("out")
    plot_rows = []
    figures = out / "figures"

    def present(name):
        return (out / name).exists()

    if present("affinity.json"):
        A = load_affinity(cfg)
        summary["stages"]["affinity"] = {"mode": A.mode, "n_samples": A.n_samples, "task_names": list(A.task_names)}
        for i, a in enumerate(A.task_names):
            for j, b in enumerate(A.task_names):
                plot_rows.append(("affinity_raw", a, b, float(A.raw[i, j])))
                plot_rows.append(("affinity_normalized", a, b, float(A.normalized[i, j])))
        plotting.affinity_heatmap(A.raw, A.normalized, A.task_names, figures / "affinity.png")
    if present("grouping.json"):
        g = read_json(out / "grouping.json")
        summary["stages"]["grouping"] = {
            "clusters": g["clusters"],
            "hard_labels": g["hard_labels"],
            "mean_silhouette": g["mean_silhouette"],
            "run_index": g["run_index"],
        }
        for name, s in zip(g["task_names"], g["silhouettes"]):
            plot_rows.append(("silhouette", name, "", s))
        plotting.silhouette_bars(g["task_names"], g["silhouettes"], g["hard_labels"], figures / "silhouette.png")
    if present("embed.json"):
        e = read_json(out / "embed.json")
        summary["stages"]["embed"] = {"initial_loss": e["initial_loss"], "final_loss": e["final_loss"], "shape": e["shape"]}
        for epoch, loss in enumerate(e["losses"]):
            plot_rows.append(("gat_loss", "reconstruction", epoch, loss))
    perf = {}
    for key, name in (("sca", "performance.json"), ("random", "random_performance.json")):
        if present(name):
            p = read_json(out / name)
            perf[key] = p
            summary["stages"][f"train_{key}"] = {"groups": p["groups"], "collective": p["collective"], "per_task": p["per_task"]}
            for group, curve in p["curves"].items():
                for epoch, loss in enumerate(curve):
                    plot_rows.append((f"loss_{key}", group, epoch, loss))
    if perf:
        curves = {f"{k}:{g}": c for k, p in perf.items() for g, c in p["curves"].items()}
        plotting.loss_curves(curves, figures / "loss_curves.png")
    if present("oracle.json"):
        o = read_json(out / "oracle.json")
        summary["stages"]["oracle"] = {"best": o["best"], "best_score": o["best_score"], "n_candidates": o["n_candidates"]}
        labels = [" | ".join(",".join(g) for g in row["partition"]) for row in o["table"]]
        scores = [row["collective"] for row in o["table"]]
        for lab, s in zip(labels, scores):
            plot_rows.append(("oracle", lab, "", s))
        best_label = " | ".join(",".join(g) for g in o["best"])
        plotting.grouping_scores(labels, scores, figures / "oracle.png", best_label)
        if "sca" in perf:
            best = o["best_score"]
            summary["sca_vs_oracle_gap"] = (best - perf["sca"]["collective"]) / abs(best) if best else None
    if present("data/dataset.json") or (cfg.data_dir and (Path(cfg.data_dir) / "dataset.json").exists()):
        manifest = read_json(_data_dir(cfg) / "dataset.json")
        summary["planted_groups"] = manifest.get("groups")
    write_tsv(out / "plot_data.tsv", ["plot", "series", "x", "y"], plot_rows)
    summary["config_hash"] = cfg.hash()
    if present("timings.json"):
        summary["timings"] = {k: v for k, v in read_json(out / "timings.json").items() if k != "config_hash"}
    status_path = out / "status.json"
    if status_path.exists():
        summary["status"] = {k: v for k, v in read_json(status_path).items() if k != "config_hash"}
    write_json(out / "summary.json", summary)
    return summary


PIPELINE = ("generate", "affinity", "group", "train", "oracle")


def run_stage(cfg: PipelineConfig, stage: str, **kwargs):
    t0 = time.perf_counter()
    fn = {
        "generate": stage_generate,
        "affinity": stage_affinity,
        "embed": stage_embed,
        "group": stage_group,
        "train": stage_train,
        "oracle": stage_oracle,
        "report": stage_report,
    }[stage]
    result = fn(cfg, **kwargs)
    _record_time(cfg, stage, time.perf_counter() - t0)
    return result


def run_pipeline(cfg: PipelineConfig, generate: bool = True) -> dict:
    """All stages in order, then the report. Stage failures are recorded in
    ``status.json`` (and the summary) before being re-raised."""
    cfg.validate()
    out = _out(cfg)
    for stale in ("timings.json", "status.json"):
        (out / stale).unlink(missing_ok=True)
    stages = [s for s in PIPELINE if (s != "generate" or (generate and not cfg.data_dir)) and (s != "oracle" or cfg.baselines.oracle)]
    done = []
    for stage in stages:
        try:
            run_stage(cfg, stage)
        except Exception as exc:
            status = {"ok": False, "completed": done, "failed": stage, "error": f"{type(exc).__name__}: {exc}", "partial": True}
            write_json(out / "status.json", status, cfg.hash())
            try:
                stage_report(cfg)
            except Exception:  # the report is best effort once a stage failed
                log.exception("could not write the partial report")
            raise
        done.append(stage)
    write_json(out / "status.json", {"ok": True, "completed": done, "partial": False}, cfg.hash())
    return run_stage(cfg, "report")
