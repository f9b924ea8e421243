"""Round loop: serve, train every client, aggregate, evaluate, persist.

A run directory holds

* ``config.txt``    echoed configuration (flat key = value form)
* ``records.jsonl`` one JSON object per completed round (append-only)
* ``state.fbsim``   full server/client state after the last completed round
* ``final.fbsim``   evaluated model(s) at the end of the run
* ``status.json``   ``running`` / ``complete`` / ``failed``
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ExperimentConfig
from .container import atomic_write, load_checkpoint, save_checkpoint
from .data import ClientDataset, FederatedDataset, load_dataset, make_federated_dataset
from .errors import ConfigError, ContainerError, NumericError
from .nn import ModelSpec, ParamVector, build_model, forward
from .strategies import (ClientState, ServerState, StrategyKind, aggregate, bn_float_count, comm_footprint,
                         download_floats, evaluation_models, init_clients, init_server, local_train, serve)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RECORD_FIELDS = ("round", "f1_micro", "f1_macro", "loss_per_client", "floats_up", "floats_down",
                 "wall_ms_per_client")


@dataclass
class RoundRecord:
    round: int
    f1_micro: float
    f1_macro: float
    loss_per_client: list[float]
    floats_up: int
    floats_down: int
    floats_up_per_client: list[int]
    floats_down_per_client: list[int]
    wall_ms_per_client: list[float] | None

    @property
    def wall_ms_total(self) -> float | None:
        return None if self.wall_ms_per_client is None else float(sum(self.wall_ms_per_client))

    def to_json(self) -> str:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "round": self.round,
            "f1_micro": self.f1_micro,
            "f1_macro": self.f1_macro,
            "loss_per_client": self.loss_per_client,
            "floats_up": self.floats_up,
            "floats_down": self.floats_down,
            "floats_up_per_client": self.floats_up_per_client,
            "floats_down_per_client": self.floats_down_per_client,
            "wall_ms_per_client": self.wall_ms_per_client,
        }
        return json.dumps(payload)

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ContainerError(f"record schema version {version} is not supported (expected {SCHEMA_VERSION})")
        return cls(d["round"], d["f1_micro"], d["f1_macro"], d["loss_per_client"], d["floats_up"],
                   d["floats_down"], d["floats_up_per_client"], d["floats_down_per_client"],
                   d["wall_ms_per_client"])


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    final_models: dict[str, ParamVector] = field(default_factory=dict)
    rounds_to_threshold: dict[float, int | None] = field(default_factory=dict)
    run_dir: Path | None = None

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]


# -- metrics ----------------------------------------------------------------

def f1_scores(predictions: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Micro and macro F1 in percent; a class with no TP, FP or FN scores 0."""
    pred = np.asarray(predictions, dtype=bool)
    true = np.asarray(labels, dtype=bool)
    tp = (pred & true).sum(axis=0).astype(np.float64)
    fp = (pred & ~true).sum(axis=0).astype(np.float64)
    fn = (~pred & true).sum(axis=0).astype(np.float64)
    denom = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = 2 * tp.sum() / denom if denom > 0 else 0.0
    per_class_denom = 2 * tp + fp + fn
    per_class = np.divide(2 * tp, per_class_denom, out=np.zeros_like(tp), where=per_class_denom > 0)
    return 100.0 * float(micro), 100.0 * float(per_class.mean())


def evaluate(models: ParamVector | list[ParamVector], spec: ModelSpec, test: ClientDataset) -> tuple[float, float]:
    """Test-split F1 (threshold 0.5 on sigmoid outputs); averaged over ``models``."""
    if isinstance(models, ParamVector):
        models = [models]
    if len(test) == 0:
        raise ConfigError("empty test split")
    scores = []
    for m in models:
        logits = forward(m, spec, test.features, mode="eval").logits
        scores.append(f1_scores(logits >= 0.0, test.labels))
    micro, macro = np.mean(scores, axis=0)
    return float(micro), float(macro)


def rounds_to_threshold(records: list[RoundRecord] | list[float], theta: float) -> int | None:
    """First round whose micro-F1 reaches ``theta``; ``None`` if never."""
    if not 0 < theta < 100:
        raise ConfigError(f"threshold {theta} outside (0, 100)")
    for i, rec in enumerate(records, 1):
        value = rec.f1_micro if isinstance(rec, RoundRecord) else float(rec)
        r = rec.round if isinstance(rec, RoundRecord) else i
        if value >= theta:
            return r
    return None


def read_records(path: Path) -> list[RoundRecord]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(RoundRecord.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ContainerError(f"{path}:{lineno}: malformed record ({exc})") from None
    return records


# -- state -------------------------------------------------------------------

@dataclass
class Simulation:
    cfg: ExperimentConfig
    kind: StrategyKind
    dataset: FederatedDataset
    spec: ModelSpec
    server: ServerState
    clients: list[ClientState]

    @property
    def sizes(self) -> list[int]:
        return [len(c.data) for c in self.clients]


def load_or_generate(cfg: ExperimentConfig) -> FederatedDataset:
    if cfg.dataset:
        return load_dataset(Path(cfg.dataset))
    return make_federated_dataset(cfg.synthetic_config(), cfg.scenario_kind)


def build_simulation(cfg: ExperimentConfig, dataset: FederatedDataset | None = None) -> Simulation:
    dataset = dataset if dataset is not None else load_or_generate(cfg)
    kind = cfg.strategy_kind
    spec = cfg.model.spec(dataset.input_dim, dataset.num_classes)
    w0 = build_model(spec, cfg.seed)
    K = len(dataset.clients)
    server = init_server(kind, cfg.hparams, w0, K, seed=cfg.seed)
    clients = init_clients(kind, w0, dataset.clients)
    return Simulation(cfg, kind, dataset, spec, server, clients)


def state_vectors(sim: Simulation) -> dict[str, ParamVector]:
    s = sim.server
    vecs = {"server.w": s.w}
    if s.v is not None:
        vecs["server.v"] = s.v
    for i, hn in enumerate(s.hypernets):
        vecs[f"server.hypernet.{i}"] = hn
    for i, m in enumerate(s.client_models):
        vecs[f"server.client_model.{i}"] = m
    for c in sim.clients:
        for attr in ("w", "v", "h", "prev_local", "bn_local"):
            value = getattr(c, attr)
            if value is not None:
                vecs[f"client.{c.client_id}.{attr}"] = value
    return vecs


def restore_state(sim: Simulation, vectors: dict[str, ParamVector], completed_round: int) -> None:
    s = sim.server
    s.w = vectors["server.w"]
    s.v = vectors.get("server.v")
    s.hypernets = [vectors[f"server.hypernet.{i}"] for i in range(len(s.hypernets))]
    s.client_models = [vectors[f"server.client_model.{i}"] for i in range(len(s.client_models))]
    s.round = completed_round + 1
    for c in sim.clients:
        for attr in ("w", "v", "h", "prev_local", "bn_local"):
            key = f"client.{c.client_id}.{attr}"
            if key in vectors:
                setattr(c, attr, vectors[key])


def client_rng(seed: int, client_id: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 11, int(client_id), int(round_index)]))


def evaluate_simulation(sim: Simulation) -> tuple[float, float]:
    return evaluate(evaluation_models(sim.kind, sim.server, sim.clients), sim.spec, sim.dataset.test)


def run_round(sim: Simulation, round_index: int, threads: int = 1) -> RoundRecord:
    """One serve / local-train / aggregate cycle over all clients."""
    cfg, kind = sim.cfg, sim.kind
    served = [serve(kind, sim.server, c.client_id) for c in sim.clients]
    server_v = sim.server.v

    def train(c: ClientState):
        return local_train(kind, cfg.hparams, c, served[c.client_id], sim.spec, server_v, cfg.local_epochs,
                           cfg.eta, cfg.batch_size, cfg.optimizer, client_rng(cfg.seed, c.client_id, round_index),
                           round_index)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            updates = list(pool.map(train, sim.clients))
    else:
        updates = [train(c) for c in sim.clients]
    aggregate(kind, cfg.hparams, sim.server, updates, sim.sizes, eta=cfg.eta)
    micro, macro = evaluate_simulation(sim)
    down = download_floats(kind, sim.spec.num_params, bn_float_count(sim.spec))
    up_per_client = [u.upload_floats for u in updates]
    down_per_client = [down] * len(updates)
    wall = [u.wall_time * 1000.0 for u in updates] if cfg.timing == "wall" else None
    return RoundRecord(round_index, micro, macro, [u.mean_loss for u in updates], sum(up_per_client),
                       sum(down_per_client), up_per_client, down_per_client, wall)


def _write_status(run_dir: Path, status: str, **extra) -> None:
    payload = {"status": status, **extra}
    atomic_write(run_dir / "status.json", (json.dumps(payload, sort_keys=True) + "\n").encode())


def _append(path: Path, line: str) -> None:
    with open(path, "a") as fh:
        fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _repair_tail(path: Path) -> None:
    """Drop a partially written last line left by a crash mid-append."""
    if not path.exists():
        return
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        cut = data.rfind(b"\n") + 1
        with open(path, "r+b") as fh:
            fh.truncate(cut)


def run_experiment(cfg: ExperimentConfig, resume: bool = False, dataset: FederatedDataset | None = None,
                   run_dir: str | Path | None = None) -> RunResult:
    """Execute ``cfg.rounds`` rounds, persisting every round before the next starts.

    With ``resume`` an interrupted run continues from its last completed
    round and a completed run is returned unchanged.  A numeric blow-up
    marks the run ``failed`` (the last good state stays on disk) and
    re-raises :class:`NumericError`.
    """
    cfg.validate()
    run_dir = Path(run_dir if run_dir is not None else cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    records_path = run_dir / "records.jsonl"
    state_path = run_dir / "state.fbsim"
    echo = config_mod.dumps(cfg)

    if records_path.exists() and not resume:
        raise ConfigError(f"{run_dir} already holds records; pass resume=True (--resume) to continue it")
    if resume and (run_dir / "config.txt").exists() and (run_dir / "config.txt").read_text() != echo:
        raise ConfigError(f"{run_dir}: configuration differs from the run being resumed")

    sim = build_simulation(cfg, dataset)
    atomic_write(run_dir / "config.txt", echo.encode())

    _repair_tail(records_path)
    records = read_records(records_path)
    if state_path.exists() and resume:
        vectors, meta = load_checkpoint(state_path)
        done = int(meta["round"])
        if done == len(records) + 1:
            # crashed between checkpoint and record append
            _append(records_path, meta["record"])
            records.append(RoundRecord.from_dict(json.loads(meta["record"])))
        if done != len(records):
            raise ContainerError(f"{run_dir}: checkpoint is at round {done} but {len(records)} records exist")
        restore_state(sim, vectors, done)
    elif records:
        raise ContainerError(f"{run_dir}: records exist without a state checkpoint")

    threads = min(cfg.threads, int(os.environ.get("FBSIM_THREADS", cfg.threads)))
    _write_status(run_dir, "running", round=len(records))
    for r in range(len(records) + 1, cfg.rounds + 1):
        try:
            rec = run_round(sim, r, threads)
            if not (np.isfinite(rec.f1_micro) and all(np.isfinite(rec.loss_per_client))):
                raise NumericError("non-finite metrics", round=r)
        except NumericError as exc:
            _write_status(run_dir, "failed", round=r, error=str(exc), last_good_round=len(records))
            raise
        line = rec.to_json()
        save_checkpoint(state_path, state_vectors(sim), {"round": r, "record": line,
                                                          "strategy": sim.kind.value})
        _append(records_path, line)
        records.append(rec)
        log.info("round %d: f1_micro=%.2f f1_macro=%.2f", r, rec.f1_micro, rec.f1_macro)

    final = {f"model.{i}": m for i, m in enumerate(evaluation_models(sim.kind, sim.server, sim.clients))}
    save_checkpoint(run_dir / "final.fbsim", final, {"round": cfg.rounds, "strategy": sim.kind.value})
    _write_status(run_dir, "complete", round=cfg.rounds)
    return RunResult(cfg, records, final,
                     {theta: rounds_to_threshold(records, theta) for theta in cfg.thresholds}, run_dir)


def simulate(cfg: ExperimentConfig, dataset: FederatedDataset | None = None) -> tuple[list[RoundRecord], Simulation]:
    """In-memory run without any files; used by tests and scripts."""
    cfg.validate()
    sim = build_simulation(cfg, dataset)
    records = [run_round(sim, r, 1) for r in range(1, cfg.rounds + 1)]
    return records, sim

