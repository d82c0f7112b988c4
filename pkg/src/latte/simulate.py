"""Federation runs: build clients from a config, interleave their streams, schedule rounds, report metrics."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .adapt import POLICIES, CommRound, LatteClient, LatteParams, communicate, preset
from .data import (
    EVAL_TAG,
    STREAM_TAG,
    EmbeddingDataset,
    TheoryWorld,
    client_rng,
    load_dataset,
    orthogonal_ood_pairs,
    partition,
    sample_theory_batch,
    theory_predictor,
)
from .errors import ConfigError, LatteError, SimulationError
from .memory import COSINE, EUCLIDEAN, LocalMemory
from .server import GlobalMemory
from .theory import ErrorReport, analytic_error, asymptotic_direction, asymptotic_targets, calibrated_world, mc_error

MODES = ("benchmark", "theory")
INTERLEAVINGS = ("round_robin", "sequential")

TRACE_COLUMNS = ("client", "step", "pseudo_initial", "label_final", "true_label", "entropy_initial", "comm_round_flag")
RETRIEVAL_COLUMNS = ("downloader", "uploader", "class", "similarity")


def comm_bytes(c: int, d: int, k_e: int, bytes_per_scalar: int = 2) -> Tuple[int, int]:
    """Per-round (upload, download) payload bound for one client."""
    if min(c, d, bytes_per_scalar) <= 0 or k_e < 0:
        raise ConfigError("comm_bytes needs positive sizes")
    return c * d * bytes_per_scalar, c * k_e * d * bytes_per_scalar


@dataclass
class ExperimentConfig:
    mode: str = "benchmark"
    data: Optional[Dict[str, str]] = None  # {"manifest": path} or {"federation": path}
    world: Optional[Dict[str, Any]] = None
    clients_per_domain: int = 10
    n_id: int = 1
    n_ood: int = 0
    params: Any = "cifar10c-latte"  # preset name or dict (optionally with a "preset" key)
    policy: str = "latte"
    interleaving: str = "round_robin"
    seed: int = 0
    samples_per_client: Optional[int] = None
    eval_size: int = 20_000
    bytes_per_scalar: int = 2
    workers: int = 1
    repeats: int = 1
    base_dir: str = field(default=".", repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.interleaving not in INTERLEAVINGS:
            raise ConfigError(f"interleaving must be one of {INTERLEAVINGS}, got {self.interleaving!r}")
        if (self.data is None) == (self.world is None):
            raise ConfigError("exactly one of 'data' and 'world' must be given")
        if self.mode == "theory" and self.world is None:
            raise ConfigError("theory mode needs a 'world'")
        if self.mode == "benchmark" and self.data is None:
            raise ConfigError("benchmark mode needs 'data'")
        if self.data is not None and len(set(self.data) & {"manifest", "federation"}) != 1:
            raise ConfigError("'data' needs exactly one of 'manifest' or 'federation'")
        for name in ("clients_per_domain", "n_id", "eval_size", "workers", "repeats"):
            if not (isinstance(getattr(self, name), int) and getattr(self, name) >= 1):
                raise ConfigError(f"{name} must be an integer >= 1")
        if not (isinstance(self.n_ood, int) and self.n_ood >= 0):
            raise ConfigError("n_ood must be an integer >= 0")
        if self.mode == "theory" and not (isinstance(self.samples_per_client, int) and self.samples_per_client >= 1):
            raise ConfigError("theory mode needs samples_per_client >= 1")
        if self.bytes_per_scalar not in (2, 4):
            raise ConfigError("bytes_per_scalar must be 2 or 4")
        self.latte_params()  # validate early

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        names = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d, base_dir=str(base_dir))

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        p = Path(path)
        try:
            d = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {str(p)!r} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {str(p)!r} is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d, p.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def latte_params(self) -> LatteParams:
        p = self.params
        if isinstance(p, LatteParams):
            params = p
        elif isinstance(p, str):
            params = preset(p)
        elif isinstance(p, dict):
            p = dict(p)
            base = preset(p.pop("preset")) if "preset" in p else LatteParams()
            if "geometry" not in p and self.mode == "theory":
                p["geometry"] = EUCLIDEAN
            params = LatteParams.from_dict({**base.to_dict(), **p})
        else:
            raise ConfigError("params must be a preset name or a mapping")
        return params

    def resolve(self, rel: str) -> Path:
        q = Path(rel)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def theory_world(self) -> TheoryWorld:
        w = dict(self.world)
        offset = w.pop("ood_offset", 5.0)
        if "calibrated" in w:
            cal = w.pop("calibrated")
            if w:
                raise ConfigError(f"unexpected keys next to 'calibrated': {sorted(w)}")
            base = calibrated_world(int(cal["d"]), float(cal["mu_norm"]), float(cal["eps_pre"]), float(cal.get("t_scale", 100.0)))
        else:
            base = TheoryWorld.from_dict(w)
        if self.n_ood and not base.ood_centers:
            base = TheoryWorld(base.mu, base.w_pre, base.b_pre, base.t_scale, tuple(orthogonal_ood_pairs(base, 2, offset)))
        return base


@dataclass
class ClientStream:
    client_id: int
    X: np.ndarray
    y: np.ndarray
    group: str  # domain id in benchmark mode, "id"/"ood" in theory mode
    ood_index: Optional[int] = None


@dataclass
class MetricsReport:
    per_client: List[dict]
    per_domain: Dict[str, float]
    total: dict
    comm: dict
    theory: Optional[dict] = None
    config: Optional[dict] = None
    round_log: List[Tuple[int, int, int]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = {
            "per_client": self.per_client,
            "per_domain": self.per_domain,
            "total": self.total,
            "comm": self.comm,
            "theory": self.theory,
        }
        if self.config is not None:
            d["config"] = self.config
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


class Federation:
    """Clients, server and streams for one run; :meth:`run` drives them to completion."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.params = config.latte_params()
        self.world: Optional[TheoryWorld] = None
        self.streams, self.classifier, normalized = self._build_streams()
        if not normalized and self.params.geometry == COSINE:
            raise ConfigError("raw (unnormalized) embeddings need the euclidean geometry")
        n = len(self.streams)
        self.server = GlobalMemory(
            self.classifier.num_classes, n, self.classifier.dim, require_unit=self.params.geometry == COSINE
        )
        shared = LocalMemory(self.classifier.num_classes, self.params.k_l) if config.policy == "global_shared" else None
        self.clients = [
            LatteClient(s.client_id, self.classifier, self.params, config.policy, shared) for s in self.streams
        ]
        self.trace_rows: List[list] = []
        self.retrieval_rows: List[tuple] = []
        self.rounds: List[CommRound] = []
        self.keep_trace = False
        self.keep_retrievals = False

    def _build_streams(self):
        cfg = self.config
        if cfg.mode == "theory":
            world = cfg.theory_world()
            self.world = world
            streams = []
            for i in range(cfg.n_id + cfg.n_ood):
                ood = None if i < cfg.n_id else (i - cfg.n_id) % len(world.ood_centers)
                X, y = sample_theory_batch(world, cfg.samples_per_client, client_rng(cfg.seed, STREAM_TAG, i), ood)
                streams.append(ClientStream(i, X, y, "id" if ood is None else "ood", ood))
            return streams, theory_predictor(world).classifier, False
        if "manifest" in cfg.data:
            ds = load_dataset(cfg.resolve(cfg.data["manifest"]))
            shards = partition(ds, cfg.clients_per_domain, cfg.seed)
            streams = [
                ClientStream(s.client_id, ds.embeddings[s.indices], ds.labels[s.indices], str(s.domain)) for s in shards
            ]
            if cfg.samples_per_client:
                for s in streams:
                    s.X, s.y = s.X[: cfg.samples_per_client], s.y[: cfg.samples_per_client]
            return streams, ds.classifier, ds.normalized
        return self._federation_streams(cfg.resolve(cfg.data["federation"]))

    def _federation_streams(self, path: Path):
        try:
            fed = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"federation manifest {str(path)!r} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"federation manifest is not valid JSON: {e}") from None
        entries = fed.get("clients") if isinstance(fed, dict) else None
        if not entries or any(e.get("id") != k for k, e in enumerate(entries)):
            raise ConfigError("federation manifest needs a 'clients' list with ids 0, 1, 2, ...")
        streams, clf, normalized = [], None, True
        for entry in entries:
            ds: EmbeddingDataset = load_dataset(path.parent / entry["dataset"])
            if clf is None:
                clf, normalized = ds.classifier, ds.normalized
            elif ds.dim != clf.dim or ds.num_classes != clf.num_classes:
                raise ConfigError(f"client {entry['id']} dataset does not match the federation's classifier")
            X, y = ds.embeddings, ds.labels
            if self.config.samples_per_client:
                X, y = X[: self.config.samples_per_client], y[: self.config.samples_per_client]
            streams.append(ClientStream(int(entry["id"]), X, y, entry.get("group", "id"), entry.get("ood_index")))
        if fed.get("world") is not None:
            self.world = TheoryWorld.from_dict(fed["world"])
        return streams, clf, normalized

    # -- driving -------------------------------------------------------------

    def _step(self, i: int, t: int):
        s = self.streams[i]
        try:
            tr = self.clients[i].step(s.X[t])
        except LatteError as e:
            raise SimulationError(i, t, e) from e
        return tr

    def _record(self, i: int, t: int, tr):
        self._correct[i] += int(tr.label_final == self.streams[i].y[t])
        self._zs_correct[i] += int(tr.pseudo_initial == self.streams[i].y[t])
        if self.keep_trace:
            self.trace_rows.append(
                [i, t, tr.pseudo_initial, tr.label_final, int(self.streams[i].y[t]), repr(float(tr.entropy_initial)), 0]
            )

    def _maybe_communicate(self, i: int, t: int):
        cl = self.clients[i]
        if not cl.due():
            return
        try:
            rnd = communicate(cl, self.server, self.config.bytes_per_scalar)
        except LatteError as e:
            raise SimulationError(i, t, e) from e
        self.rounds.append(rnd)
        if self.keep_trace:
            self.trace_rows[-1 if self.config.interleaving == "sequential" else self._last_row[i]][6] = 1
        if self.keep_retrievals:
            for y, items in sorted(rnd.retrieved.items()):
                for r in items:
                    self.retrieval_rows.append((i, r.origin, y, repr(r.similarity)))

    def run(self) -> MetricsReport:
        n = len(self.clients)
        self._correct = [0] * n
        self._zs_correct = [0] * n
        self._last_row = [0] * n
        if self.config.interleaving == "sequential":
            for i, s in enumerate(self.streams):
                for t in range(len(s.y)):
                    self._record(i, t, self._step(i, t))
                    self._maybe_communicate(i, t)
        else:
            self._run_round_robin()
        return self._report()

    def _run_round_robin(self):
        # Each epoch: every active client consumes one sample (in parallel if
        # allowed), then due clients talk to the server in client order. The
        # split keeps results identical for any worker count.
        workers = self.config.workers if self.config.policy != "global_shared" else 1
        longest = max(len(s.y) for s in self.streams)
        pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            for t in range(longest):
                active = [i for i, s in enumerate(self.streams) if t < len(s.y)]
                if pool is None:
                    traces = [self._step(i, t) for i in active]
                else:
                    traces = list(pool.map(lambda i: self._step(i, t), active))
                for i, tr in zip(active, traces):
                    self._last_row[i] = len(self.trace_rows)
                    self._record(i, t, tr)
                for i in active:
                    self._maybe_communicate(i, t)
        finally:
            if pool is not None:
                pool.shutdown()

    # -- reporting -------------------------------------------------------------

    def _report(self) -> MetricsReport:
        per_client = []
        groups: Dict[str, List[int]] = {}
        for i, s in enumerate(self.streams):
            k = len(s.y)
            per_client.append(
                {
                    "client": s.client_id,
                    "group": s.group,
                    "processed": k,
                    "correct": self._correct[i],
                    "accuracy": self._correct[i] / k if k else 0.0,
                }
            )
            groups.setdefault(s.group, []).append(i)
        per_domain = {
            g: sum(self._correct[i] for i in idx) / max(1, sum(len(self.streams[i].y) for i in idx))
            for g, idx in sorted(groups.items())
        }
        processed = sum(len(s.y) for s in self.streams)
        correct = sum(self._correct)
        zs = sum(self._zs_correct)
        total = {
            "processed": processed,
            "correct": correct,
            "accuracy": correct / processed if processed else 0.0,
            "zero_shot_accuracy": zs / processed if processed else 0.0,
            "gain": (correct - zs) / processed if processed else 0.0,
        }
        c, d, k_e = self.classifier.num_classes, self.classifier.dim, self.params.k_e
        up_bound, down_bound = comm_bytes(c, d, k_e, self.config.bytes_per_scalar)
        log = [(r.client, r.upload_bytes, r.download_bytes) for r in self.rounds]
        up = sum(u for _, u, _ in log)
        down = sum(v for _, _, v in log)
        comm = {
            "rounds": len(log),
            "upload_bytes": up,
            "download_bytes": down,
            "framing_bytes": sum(r.framing_bytes for r in self.rounds),
            "bytes_per_round": (up + down) / len(log) if log else 0.0,
            "max_round_upload": max((u for _, u, _ in log), default=0),
            "max_round_download": max((v for _, _, v in log), default=0),
            "bound_upload": up_bound,
            "bound_download": down_bound,
            "bytes_per_scalar": self.config.bytes_per_scalar,
        }
        theory = self._theory_metrics() if self.config.mode == "theory" else None
        echo = self.config.to_dict()
        echo.pop("workers")  # execution detail; results do not depend on it
        return MetricsReport(per_client, per_domain, total, comm, theory, echo, log)

    def _theory_metrics(self) -> dict:
        world, cfg = self.world, self.config
        pred = theory_predictor(world)
        targets = asymptotic_targets(world)
        frozen = LatteClient(-1, self.classifier, self.params, "local_only")
        for y, m in enumerate(targets):
            frozen.local.update(m, y, 0.0)
        post_err = pre_err = asym_err = 0
        n_eval = 0
        clients = []
        for i, s in enumerate(self.streams):
            post = mc_error(self.clients[i].predict, world, cfg.eval_size, client_rng(cfg.seed, EVAL_TAG, i), s.ood_index)
            entry = {"client": s.client_id, "group": s.group, "eps_post": post.estimate}
            if s.ood_index is None:
                pre = mc_error(pred.predict, world, cfg.eval_size, client_rng(cfg.seed, EVAL_TAG, i))
                asym = mc_error(frozen.predict, world, cfg.eval_size, client_rng(cfg.seed, EVAL_TAG, i))
                post_err += post.errors
                pre_err += pre.errors
                asym_err += asym.errors
                n_eval += cfg.eval_size
                entry["eps_pre"] = pre.estimate
                entry["memory_radius"] = _memory_radius(self.clients[i].local, targets)
            clients.append(entry)
        post_rep = ErrorReport.from_counts(post_err, n_eval)
        out = {
            "eps_post": post_rep.estimate,
            "eps_post_ci": post_rep.half_width,
            "eps_pre": ErrorReport.from_counts(pre_err, n_eval).estimate,
            "eps_asym_frozen": ErrorReport.from_counts(asym_err, n_eval).estimate,
            "eval_samples": n_eval,
            "memory_radius": max(e["memory_radius"] for e in clients if "memory_radius" in e),
            "per_client": clients,
        }
        if world.b_pre == 0.0:
            out["eps_asym_analytic"] = analytic_error(world.mu, asymptotic_direction(world))
        return out

    # -- CSV output ----------------------------------------------------------

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            w.writerows(self.trace_rows)

    def write_retrieval_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RETRIEVAL_COLUMNS)
            w.writerows(self.retrieval_rows)


def _memory_radius(local: LocalMemory, targets) -> float:
    """Largest distance from a memory entry to its class's limit point (nan if memory is empty)."""
    dists = [
        float(np.linalg.norm(e.embedding - targets[y]))
        for y in range(min(local.num_classes, len(targets)))
        for e in local.entries(y)
    ]
    return max(dists) if dists else math.nan


def run(config: ExperimentConfig, trace=None, retrieval_log=None) -> MetricsReport:
    fed = Federation(config)
    fed.keep_trace = trace is not None
    fed.keep_retrievals = retrieval_log is not None
    report = fed.run()
    if trace is not None:
        fed.write_trace(trace)
    if retrieval_log is not None:
        fed.write_retrieval_log(retrieval_log)
    return report


def run_repeats(config: ExperimentConfig) -> dict:
    """Run ``config.repeats`` times with consecutive seeds; summarize total accuracy."""
    reports = []
    for r in range(config.repeats):
        cfg = ExperimentConfig.from_dict({**config.to_dict(), "seed": config.seed + r, "repeats": 1}, config.base_dir)
        reports.append(run(cfg).to_dict())
    accs = np.array([r["total"]["accuracy"] for r in reports])
    return {
        "repeats": config.repeats,
        "accuracy_mean": float(accs.mean()),
        "accuracy_std": float(accs.std(ddof=1)) if accs.size > 1 else 0.0,
        "reports": reports,
    }
