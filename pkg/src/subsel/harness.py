"""Experiment orchestration: validated configs, seeded runs, sweeps,
artifact layout, and selection export.

A run is fully determined by its config (canonically hashed) plus the
seed list, provided the oracle is deterministic. Artifacts land under
out_dir/<hash12>/: the cluster model, embeddings, per-seed training logs
and traces, a reward-landscape dump, and report.json.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import clustering
from .agents import (ClimbConfig, DqnConfig, DynaConfig, PpoConfig, climb_disc,
                     rollout_policy, trace_record, train_dqn, train_dyna_dqn,
                     train_ppo)
from .baselines import (SelectionResult, brute_force_optimum,
                        loss_ranked_baseline, random_baseline, random_search)
from .clustering import (ClusterModel, export_cluster_model, kmeans,
                         load_cluster_model, read_embeddings, read_labels,
                         stratified_kmeans, synthetic_cluster_model,
                         write_embeddings, write_labels)
from .env import Encoder, Mdp, SubsetState, budget_from_fraction
from .errors import ConfigError, OracleError
from .oracle_client import ExternalOracle
from .rewards import (RewardCache, RewardFunction, RndBonus, SyntheticLandscape,
                      SyntheticOracle, loss_to_score)
from .rngutil import derive_seed

AGENT_NAMES = ("dqn", "dqn_transformer", "ppo", "ppo_warm", "dynadqn", "climb",
               "random", "random_search", "top_loss", "bottom_loss", "brute_force")

ORACLE_CMD_ENV = "SUBSEL_ORACLE_CMD"


class LandscapeSpec(BaseModel):
    """Synthetic reward landscape: either sampled from a seed or given
    explicitly (quality/redundancy arrays)."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    density: float = 0.3
    lam: float = 0.5
    curvature: float = 0.5
    quality: Optional[List[float]] = None
    redundancy: Optional[List[List[float]]] = None

    def build(self, k: int) -> SyntheticLandscape:
        if self.quality is not None:
            q = np.asarray(self.quality, dtype=np.float64)
            if q.size != k:
                raise ConfigError(f"landscape quality has {q.size} entries, k={k}")
            w = (np.zeros((k, k)) if self.redundancy is None
                 else np.asarray(self.redundancy, dtype=np.float64))
            return SyntheticLandscape(quality=q, redundancy=w,
                                      lam=self.lam, curvature=self.curvature)
        return SyntheticLandscape.random(k, seed=self.seed, density=self.density,
                                         lam=self.lam, curvature=self.curvature)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # data source: file-backed embeddings, or a synthetic world when absent
    embeddings_path: Optional[str] = None
    labels_path: Optional[str] = None
    landscape: LandscapeSpec = Field(default_factory=LandscapeSpec)
    data_seed: int = 0
    embedding_dim: int = 8
    points_per_cluster: int = 16

    k: int = 64
    delta: float = 1.0 / 16.0
    clustering: Literal["kmeans", "stratified"] = "kmeans"
    kmeans_max_iters: int = 100
    encoder: Literal["binary_mask", "mean_std", "concat"] = "mean_std"
    subsampling: Literal["random", "furthest"] = "furthest"
    subsample_size: int = 64
    m_reps: int = 1

    reward: Literal["loss_val", "loss_train", "acc"] = "loss_val"
    rnd: bool = False
    rnd_beta: float = 0.1

    agent: Literal[AGENT_NAMES] = "dqn"
    agent_params: Dict[str, Any] = Field(default_factory=dict)
    n_rollouts: int = 220
    fraction: Optional[float] = None  # loss-ranked point fraction; default: delta

    seeds: List[int] = Field(default_factory=lambda: [0])
    out_dir: str = "runs"
    oracle_cmd: Optional[str] = None
    oracle_timeout: float = 60.0

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not (0.0 < self.delta <= 1.0):
            raise ValueError("delta must be in (0, 1]")
        if self.subsample_size < 1 or self.m_reps < 1:
            raise ValueError("subsample_size and m_reps must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.rnd_beta < 0.0:
            raise ValueError("rnd_beta must be >= 0")
        if self.fraction is not None and not (0.0 < self.fraction <= 1.0):
            raise ValueError("fraction must be in (0, 1]")
        if self.agent == "dqn_transformer" and self.encoder != "concat":
            raise ValueError("agent dqn_transformer requires encoder=concat")
        if self.clustering == "stratified" and self.embeddings_path and not self.labels_path:
            raise ValueError("stratified clustering needs labels_path")
        budget_from_fraction(self.k, self.delta)
        return self

    @property
    def budget(self) -> int:
        return budget_from_fraction(self.k, self.delta)


class SeedOutcome(BaseModel):
    seed: int
    method: str
    score: float
    selected_clusters: Optional[List[int]] = None
    selected_points: Optional[List[int]] = None
    oracle_calls: int = 0
    wall_ms: float = 0.0
    training_log: Optional[str] = None
    trace: Optional[str] = None
    extra: Dict[str, Any] = Field(default_factory=dict)


class RunReport(BaseModel):
    config_hash: str
    run_dir: str
    k: int
    budget: int
    agent: str
    reward: str
    results: List[SeedOutcome]
    cluster_model_path: str
    embeddings_path: str
    labels_path: Optional[str] = None
    landscape_dump: Optional[str] = None
    status: Literal["ok", "error"] = "ok"
    error: Optional[str] = None


class SweepCell(BaseModel):
    axis: str
    value: Any
    status: Literal["ok", "error"]
    mean_score: Optional[float] = None
    std_score: Optional[float] = None
    budget: Optional[int] = None
    report_path: Optional[str] = None
    error: Optional[str] = None


class SweepReport(BaseModel):
    axis: str
    values: List[Any]
    cells: List[SweepCell]
    summary_csv: str


def canonical_config_doc(config: ExperimentConfig) -> str:
    """Canonical serialized form: sorted keys, compact separators,
    JSON-normalized numbers."""
    return json.dumps(config.model_dump(mode="json"), sort_keys=True,
                      separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_config_doc(config).encode("utf-8")).hexdigest()


def load_config_doc(path: Union[str, Path]) -> dict:
    """Parse a TOML or JSON config file into a plain dict."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(raw.decode("utf-8"))
        return json.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config {path} is not valid TOML/JSON: {exc}") from exc


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    return parse_config(load_config_doc(path))


def _build_world(config: ExperimentConfig):
    """Cluster model + labels + oracle for a config. The synthetic world
    arrives pre-clustered; file-backed embeddings are clustered here."""
    labels = None
    if config.embeddings_path:
        rows = read_embeddings(config.embeddings_path)
        if config.labels_path:
            labels = read_labels(config.labels_path)
        if config.clustering == "stratified":
            model = stratified_kmeans(
                rows, labels, config.k, seed=config.data_seed,
                max_iters=config.kmeans_max_iters,
                subsample_size=config.subsample_size,
                subsample_strategy=config.subsampling)
        else:
            model = kmeans(
                rows, config.k, seed=config.data_seed,
                max_iters=config.kmeans_max_iters,
                subsample_size=config.subsample_size,
                subsample_strategy=config.subsampling)
    else:
        model = synthetic_cluster_model(
            config.k, dim=config.embedding_dim,
            points_per_cluster=config.points_per_cluster,
            seed=config.data_seed,
            subsample_size=config.subsample_size,
            subsample_strategy=config.subsampling)
        labels = model.labels

    oracle_cmd = os.environ.get(ORACLE_CMD_ENV) or config.oracle_cmd
    if oracle_cmd:
        oracle = ExternalOracle(oracle_cmd, timeout=config.oracle_timeout)
    else:
        landscape = config.landscape.build(model.k)
        oracle = SyntheticOracle(landscape, assignment=model.assignment,
                                 seed=config.data_seed)
    return model, labels, oracle


def _instantiate(cls, params: Dict[str, Any], **fixed):
    try:
        return cls(**params, **fixed)
    except TypeError as exc:
        raise ConfigError(f"bad agent_params for {cls.__name__}: {exc}") from exc


def _split_agent_params(params: Dict[str, Any]):
    """Route a flat agent_params dict to DynaConfig vs DqnConfig fields."""
    dyna_keys = set(DynaConfig.__dataclass_fields__)
    dqn_keys = set(DqnConfig.__dataclass_fields__)
    dyna, dqn = {}, {}
    for key, value in params.items():
        if key in dyna_keys:
            dyna[key] = value
        elif key in dqn_keys:
            dqn[key] = value
        else:
            raise ConfigError(f"unknown dynadqn parameter {key!r}")
    return dyna, dqn


def _greedy_selection(policy, reward_fn: RewardFunction, k: int, budget: int):
    """Deterministic rollout of a trained policy plus its episode trace
    (rewards re-read through the cache, so no extra oracle pressure)."""
    terminal, actions = rollout_policy(policy, k, budget, mode="greedy")
    trace = []
    state = SubsetState(mask=0, budget=budget, k=k)
    mdp = Mdp(k, budget)
    for action in actions:
        reward = reward_fn.reward(state, action)
        nxt, term = mdp.step(state, action)
        trace.append(trace_record(state, action, reward, term))
        state = nxt
    assert state.mask == terminal.mask
    return terminal, trace


def _run_agent(config: ExperimentConfig, reward_fn: RewardFunction,
               model: ClusterModel, budget: int, seed: int):
    """One (agent, seed) cell. Returns (SelectionResult, log, trace)."""
    agent = config.agent
    params = dict(config.agent_params)
    calls_before = reward_fn.oracle.call_count
    t0 = time.perf_counter()

    if agent in ("random", "random_search", "top_loss", "bottom_loss", "brute_force"):
        if agent == "random":
            result = random_baseline(reward_fn, budget, seed=seed)
        elif agent == "random_search":
            n_rollouts = int(params.pop("n_rollouts", config.n_rollouts))
            if params:
                raise ConfigError(f"unknown random_search parameters {sorted(params)}")
            result = random_search(reward_fn, budget, n_rollouts, seed=seed)
        elif agent in ("top_loss", "bottom_loss"):
            fraction = config.fraction if config.fraction is not None else config.delta
            result = loss_ranked_baseline(reward_fn.oracle, fraction,
                                          direction=agent.split("_")[0])
            result.seed = seed
        else:
            result = brute_force_optimum(reward_fn, budget)
            result.seed = seed
        return result, [], []

    encoder_kind = "concat" if agent == "dqn_transformer" else config.encoder
    encoder = Encoder(model, kind=encoder_kind, m_reps=config.m_reps,
                      rep_strategy=config.subsampling,
                      rep_seed=derive_seed(config.data_seed, "encoder-reps"))
    rnd = None
    if config.rnd:
        rnd = RndBonus(encoder.width, beta=config.rnd_beta,
                       seed=derive_seed(seed, "rnd"))

    if agent in ("dqn", "dqn_transformer"):
        head = "transformer" if agent == "dqn_transformer" else "mlp"
        params.pop("head", None)
        dqn_config = _instantiate(DqnConfig, params, head=head)
        trained = train_dqn(reward_fn, encoder, budget, dqn_config, seed=seed, rnd=rnd)
    elif agent in ("ppo", "ppo_warm"):
        params.pop("warm_start", None)
        ppo_config = _instantiate(PpoConfig, params, warm_start=(agent == "ppo_warm"))
        trained = train_ppo(reward_fn, encoder, budget, ppo_config, seed=seed, rnd=rnd)
    elif agent == "dynadqn":
        dyna_params, dqn_params = _split_agent_params(params)
        trained = train_dyna_dqn(reward_fn, encoder, budget,
                                 _instantiate(DynaConfig, dyna_params),
                                 _instantiate(DqnConfig, dqn_params),
                                 seed=seed, rnd=rnd)
    elif agent == "climb":
        climb_config = _instantiate(ClimbConfig, params)
        outcome = climb_disc(reward_fn, budget, climb_config, seed=seed)
        result = SelectionResult(
            method="climb", score=outcome.best_score,
            selected_clusters=outcome.best_clusters,
            oracle_calls=reward_fn.oracle.call_count - calls_before, seed=seed,
            wall_ms=(time.perf_counter() - t0) * 1e3,
            extra={"n_queries": outcome.n_queries, "fallback": outcome.fallback},
        )
        return result, outcome.log, []
    else:  # pragma: no cover - guarded by config validation
        raise ConfigError(f"unknown agent {agent!r}")

    terminal, trace = _greedy_selection(trained.policy, reward_fn, model.k, budget)
    result = SelectionResult(
        method=agent, score=reward_fn.subset_score(terminal.mask),
        selected_clusters=terminal.selected,
        oracle_calls=reward_fn.oracle.call_count - calls_before, seed=seed,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        extra={"final_return": trained.returns[-1] if trained.returns else None},
    )
    return result, trained.log, trace


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _dump_landscape(reward_fn: RewardFunction, path: Path) -> None:
    """All cached subset evaluations as (state bitset, score) rows, for
    external plotting."""
    rows = []
    for (mask, split), value in sorted(reward_fn.cache.items()):
        if split != reward_fn.split:
            continue
        score = value if reward_fn.kind == "acc" else loss_to_score(value)
        rows.append((format(mask, "x"), score))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bitset_hex,score\n")
        for hex_mask, score in rows:
            fh.write(f"{hex_mask},{score!r}\n")


def run_experiment(config: ExperimentConfig,
                   cache: Optional[RewardCache] = None) -> RunReport:
    """Execute the configured agent for every seed; persist all artifacts
    under out_dir/<hash12>/."""
    digest = config_hash(config)
    budget = config.budget
    model, labels, oracle = _build_world(config)
    try:
        reward_fn = RewardFunction(oracle, model, kind=config.reward,
                                   cache=cache or RewardCache())
        run_dir = Path(config.out_dir) / digest[:12]
        run_dir.mkdir(parents=True, exist_ok=True)
        emb_path = run_dir / "embeddings.bin"
        write_embeddings(emb_path, model.embeddings.rows)
        model_path = export_cluster_model(model, run_dir / "cluster_model.json")
        labels_path = None
        if labels is not None:
            labels_path = run_dir / "labels.txt"
            write_labels(labels_path, labels)
        (run_dir / "config.json").write_text(
            canonical_config_doc(config) + "\n", encoding="utf-8")

        outcomes: List[SeedOutcome] = []
        for seed in config.seeds:
            seed_dir = run_dir / f"seed{seed}"
            seed_dir.mkdir(exist_ok=True)
            result, log, trace = _run_agent(config, reward_fn, model, budget, seed)
            log_path = trace_path = None
            if log:
                log_path = seed_dir / "training_log.jsonl"
                _write_jsonl(log_path, log)
            if trace:
                trace_path = seed_dir / "episode_trace.jsonl"
                _write_jsonl(trace_path, trace)
            point_fraction = None
            if result.selected_clusters is not None:
                member_total = sum(len(model.members[c]) for c in result.selected_clusters)
                point_fraction = member_total / model.n_points
            outcomes.append(SeedOutcome(
                seed=seed, method=result.method, score=result.score,
                selected_clusters=(None if result.selected_clusters is None
                                   else list(result.selected_clusters)),
                selected_points=(None if result.selected_points is None
                                 else list(result.selected_points)),
                oracle_calls=result.oracle_calls, wall_ms=result.wall_ms,
                training_log=(str(log_path) if log_path else None),
                trace=(str(trace_path) if trace_path else None),
                extra={**result.extra,
                       **({"point_fraction": point_fraction}
                          if point_fraction is not None else {})},
            ))

        dump_path = run_dir / "landscape.csv"
        _dump_landscape(reward_fn, dump_path)
        report = RunReport(
            config_hash=digest, run_dir=str(run_dir), k=model.k, budget=budget,
            agent=config.agent, reward=config.reward, results=outcomes,
            cluster_model_path=str(model_path), embeddings_path=str(emb_path),
            labels_path=(str(labels_path) if labels_path else None),
            landscape_dump=str(dump_path),
        )
        (run_dir / "report.json").write_text(
            report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return report
    finally:
        oracle.close()


def export_selection(report: Union[RunReport, str, Path],
                     seed: Optional[int] = None,
                     out: Optional[Union[str, Path]] = None) -> Path:
    """Expand a run's selection to a sorted, deduplicated point-id file
    (one decimal id per line) for downstream training."""
    if not isinstance(report, RunReport):
        try:
            doc = json.loads(Path(report).read_text(encoding="utf-8"))
            report = RunReport.model_validate(doc)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {report}: {exc}") from exc
        except ValidationError as exc:
            raise ConfigError(f"not a run report: {exc}") from exc
    if not report.results:
        raise ConfigError("report contains no results to export")
    if seed is None:
        outcome = report.results[0]
    else:
        matches = [r for r in report.results if r.seed == seed]
        if not matches:
            raise ConfigError(f"report has no outcome for seed {seed}")
        outcome = matches[0]
    if outcome.selected_points is not None:
        ids = sorted(set(outcome.selected_points))
    else:
        rows = read_embeddings(report.embeddings_path)
        model = load_cluster_model(report.cluster_model_path, rows)
        parts = [model.members[c] for c in outcome.selected_clusters]
        ids = np.unique(np.concatenate(parts)).tolist() if parts else []
    if out is None:
        out = Path(report.run_dir) / f"seed{outcome.seed}" / "selected_points.txt"
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
    return out


_AXES = ("k", "delta", "agent", "encoder")


def _data_signature(config: ExperimentConfig) -> str:
    """Cells may share a reward cache only when they query the same
    oracle over the same cluster model and subsamples."""
    doc = config.model_dump(mode="json")
    keys = ("embeddings_path", "labels_path", "landscape", "data_seed",
            "embedding_dim", "points_per_cluster", "k", "clustering",
            "kmeans_max_iters", "subsampling", "subsample_size", "reward",
            "oracle_cmd")
    sig = {key: doc[key] for key in keys}
    sig["env_oracle"] = os.environ.get(ORACLE_CMD_ENV)
    return json.dumps(sig, sort_keys=True)


def sweep(config: ExperimentConfig, axis: str, values: Sequence[Any]) -> SweepReport:
    """Run one config per axis value; cell failures are isolated. Writes
    a mean/std summary CSV next to the run directories."""
    if axis not in _AXES:
        raise ConfigError(f"sweep axis must be one of {_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    caches: Dict[str, RewardCache] = {}
    cells: List[SweepCell] = []
    for value in values:
        try:
            doc = config.model_dump(mode="json")
            doc[axis] = value
            cell_config = parse_config(doc)
            cache = caches.setdefault(_data_signature(cell_config), RewardCache())
            report = run_experiment(cell_config, cache=cache)
            scores = np.array([r.score for r in report.results])
            cells.append(SweepCell(
                axis=axis, value=value, status="ok",
                mean_score=float(scores.mean()),
                std_score=float(scores.std()),
                budget=report.budget,
                report_path=str(Path(report.run_dir) / "report.json"),
            ))
        except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
            cells.append(SweepCell(axis=axis, value=value, status="error",
                                   error=f"{type(exc).__name__}: {exc}"))
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = hashlib.sha256(
        (config_hash(config) + axis + json.dumps(list(values), default=str))
        .encode("utf-8")).hexdigest()[:12]
    csv_path = out_dir / f"sweep_{axis}_{tag}.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("axis,value,status,budget,mean_score,std_score,report\n")
        for cell in cells:
            fh.write(",".join([
                cell.axis, str(cell.value), cell.status,
                "" if cell.budget is None else str(cell.budget),
                "" if cell.mean_score is None else repr(cell.mean_score),
                "" if cell.std_score is None else repr(cell.std_score),
                cell.report_path or (cell.error or "").replace(",", ";"),
            ]) + "\n")
    return SweepReport(axis=axis, values=list(values), cells=cells,
                       summary_csv=str(csv_path))
