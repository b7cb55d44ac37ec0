"""Experiment orchestration: evolve over a grid of ramp times and evaluate Q.

Every (seed, t_a) pair is an independent job.  Evolved states are
checkpointed, finished rows are appended to ``results.csv`` (one line per
engine, flushed and synced) and to ``rows.jsonl`` with the full provenance,
so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .deterministic import BoundaryTruncationWarning, EvalSettings, bond_correlators_det, residual_energy
from .model import DisorderInstance, GroundReference, classical_ground, default_schedule, generate_disorder, \
    load_schedule, schedule_at
from .peps import evolve, load_checkpoint, product_plus_x, save_checkpoint, truncate_all
from .sampler import SamplerSettings, run_sampling
from .trotter import default_dt

__all__ = ["ExperimentConfig", "load_config", "run_experiment", "read_results", "WORKERS_ENV", "RESULT_COLUMNS"]

log = logging.getLogger(__name__)

WORKERS_ENV = "KZPEPS_WORKERS"
RESULT_COLUMNS = ["t_a_ns", "Q", "sigma_Q", "engine", "converged", "seed", "Q_ghz", "config_hash"]
ENGINES = ("deterministic", "monte-carlo")


@dataclass
class ExperimentConfig:
    """All knobs of a run.

    ``dt`` of ``None`` picks the largest step with per-gate angles at most
    ``max_angle``.  ``evaluator`` is ``deterministic``, ``monte-carlo`` or
    ``both``.  ``det`` and ``mc`` are keyword dictionaries for
    :class:`~kzpeps.deterministic.EvalSettings` and
    :class:`~kzpeps.sampler.SamplerSettings`.
    """

    L: int | list = 4
    seeds: list = field(default_factory=lambda: [1])
    schedule: str = "builtin"
    schedule_kind: str = "pchip"
    t_a: list = field(default_factory=lambda: [1.0, 2.0, 4.0])
    dt: float | None = None
    max_angle: float = 0.05
    D_e: int = 4
    D_t: int = 3
    s_end: float = 0.6
    neighborhood: str = "b"
    evaluator: str = "both"
    det: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)
    mc_seed: int = 0
    ground_budget: int = 16
    ground_sweeps: int = 2000
    output: str = "kz-run"

    def validate(self) -> "ExperimentConfig":
        t = [float(v) for v in self.t_a]
        if not t:
            raise ValueError("t_a grid is empty")
        if any(v <= 0 for v in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("t_a grid must be positive and strictly increasing")
        if self.D_t > self.D_e:
            raise ValueError("D_t must not exceed D_e")
        if self.evaluator not in ENGINES + ("both",):
            raise ValueError(f"unknown evaluator {self.evaluator!r}")
        if not 0.0 < self.s_end <= 1.0:
            raise ValueError("s_end must lie in (0, 1]")
        if not self.seeds:
            raise ValueError("at least one disorder seed is required")
        EvalSettings(**self.det)
        SamplerSettings(**self.mc)
        return self

    @property
    def engines(self):
        return ENGINES if self.evaluator == "both" else (self.evaluator,)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of every field except the output location."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a JSON config file; keys mirror :class:`ExperimentConfig`."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    unknown = set(data) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**data).validate()


def _schedule(cfg: ExperimentConfig):
    if cfg.schedule in ("builtin", "builtin-substitute", None):
        return default_schedule()
    return load_schedule(cfg.schedule, cfg.schedule_kind)


def _ta_tag(t):
    return f"{float(t):.6g}".replace(".", "p")


def _ground(cfg: ExperimentConfig, inst: DisorderInstance, out: Path) -> GroundReference:
    path = out / f"ground_seed{inst.seed}.json"
    if path.exists():
        return GroundReference.from_json(json.loads(path.read_text(encoding="utf-8")))
    g = classical_ground(inst, budget=cfg.ground_budget, sweeps=cfg.ground_sweeps, seed=int(inst.seed))
    path.write_text(json.dumps(g.to_json()), encoding="utf-8")
    return g


def _instance(cfg: ExperimentConfig, seed: int, out: Path) -> DisorderInstance:
    path = out / f"disorder_seed{seed}.json"
    if path.exists():
        return DisorderInstance.load(path)
    inst = generate_disorder(tuple(cfg.L) if isinstance(cfg.L, list) else cfg.L, seed)
    inst.save(path)
    return inst


def _job(cfg_dict: dict, seed: int, t_a: float, engines, out: str):
    """Evolve, truncate and evaluate one (seed, t_a) pair; returns row dictionaries."""
    cfg = ExperimentConfig(**cfg_dict)
    out = Path(out)
    states = out / "states"
    states.mkdir(exist_ok=True)
    sched = _schedule(cfg)
    inst = _instance(cfg, seed, out)
    ground = _ground(cfg, inst, out)
    dt = cfg.dt if cfg.dt is not None else default_dt(sched, inst, cfg.max_angle, cfg.s_end)
    tag = f"seed{seed}_ta{_ta_tag(t_a)}"
    ck_t = states / f"{tag}_Dt{cfg.D_t}.npz"
    diag = {"dt": dt}
    t0 = time.time()
    if ck_t.exists():
        state, header = load_checkpoint(ck_t)
        diag.update(header.get("meta", {}))
    else:
        ck_e = states / f"{tag}_De{cfg.D_e}.npz"
        if ck_e.exists():
            state, header = load_checkpoint(ck_e)
            diag.update(header.get("meta", {}))
        else:
            state, hist = evolve(product_plus_x(inst.lattice), sched, inst, t_a, dt, cfg.D_e, cfg.s_end,
                                 cfg.neighborhood)
            diag["max_ntu_loss"] = float(max(hist.max_loss, default=0.0))
            diag["evolve_seconds"] = time.time() - t0
            save_checkpoint(ck_e, state, cfg.s_end, dict(diag))
        _, reps = truncate_all(state, cfg.D_t, cfg.neighborhood)
        diag["truncate_all_loss"] = float(sum(r.local_fidelity_loss for r in reps))
        save_checkpoint(ck_t, state, cfg.s_end, dict(diag))
    j_end = schedule_at(sched, cfg.s_end)[1]
    rows = []
    for engine in engines:
        t1 = time.time()
        row = {"t_a_ns": float(t_a), "engine": engine, "seed": int(seed), "config_hash": cfg.hash()}
        try:
            if engine == "deterministic":
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", BoundaryTruncationWarning)
                    res = bond_correlators_det(state, EvalSettings(**cfg.det))
                q = residual_energy(inst, res.correlators, ground)
                row.update(Q=q, sigma_Q=0.0, converged=True)
                extra = res.metadata()
                extra["warnings"] = [str(w.message) for w in caught]
            else:
                q, s, stats = run_sampling(state, inst, ground, SamplerSettings(**cfg.mc),
                                           seed=int(cfg.mc_seed) * 100003 + int(seed) * 1009 + int(round(t_a * 1000)))
                row.update(Q=q, sigma_Q=s, converged=bool(stats.converged))
                extra = stats.to_dict()
                extra.pop("block_q", None)
            row["Q_ghz"] = row["Q"] * j_end
            row["error"] = None
        except Exception as exc:  # recorded per row, run continues
            row.update(Q=float("nan"), sigma_Q=float("nan"), converged=False, Q_ghz=float("nan"),
                       error=f"{type(exc).__name__}: {exc}")
            extra = {"traceback": traceback.format_exc()}
        row["diagnostics"] = {**diag, **extra, "eval_seconds": time.time() - t1}
        row["provenance"] = {
            "config_hash": cfg.hash(),
            "code_version": __version__,
            "disorder_seed": int(seed),
            "rng": inst.rng,
            "schedule_source": sched.source,
            "ground_method": ground.method,
            "ground_certified": ground.certified,
            "evaluator_settings": cfg.det if engine == "deterministic" else cfg.mc,
            "mc_seed": int(cfg.mc_seed),
            "D": [cfg.D_e, cfg.D_t],
            "s_end": cfg.s_end,
            "J_s_end_ghz": j_end,
        }
        rows.append(row)
    return rows


def read_results(path):
    """Rows of a results CSV as dictionaries with typed values."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            out.append({
                "t_a_ns": float(r["t_a_ns"]),
                "Q": float(r["Q"]),
                "sigma_Q": float(r["sigma_Q"]),
                "engine": r["engine"],
                "converged": r["converged"].strip().lower() == "true",
                "seed": int(r["seed"]) if r.get("seed") not in (None, "") else None,
                "Q_ghz": float(r["Q_ghz"]) if r.get("Q_ghz") not in (None, "") else float("nan"),
                "config_hash": r.get("config_hash", ""),
            })
    return out


def _commit(out: Path, row: dict):
    csv_path = out / "results.csv"
    new = not csv_path.exists()
    with open(csv_path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULT_COLUMNS)
        w.writerow([row["t_a_ns"], repr(float(row["Q"])), repr(float(row["sigma_Q"])), row["engine"],
                    row["converged"], row["seed"], repr(float(row["Q_ghz"])), row["config_hash"]])
        fh.flush()
        os.fsync(fh.fileno())
    with open(out / "rows.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row, default=_json_default) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    return str(o)


def _workers(workers):
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> dict:
    """Run every missing (seed, t_a, engine) row of ``cfg``.

    Returns a summary with the rows of this config found in
    ``results.csv`` and the number of failed rows.  The worker count
    defaults to the ``KZPEPS_WORKERS`` environment variable (1 if unset).
    """
    cfg.validate()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    meta_path = out / "metadata.json"
    meta = {
        "config": cfg.to_dict(),
        "config_hash": h,
        "code_version": __version__,
        "schedule_source": _schedule(cfg).source,
        "columns": RESULT_COLUMNS,
    }
    meta_path.write_text(json.dumps(meta, indent=2), encoding="utf-8")

    done = set()
    if (out / "results.csv").exists():
        for r in read_results(out / "results.csv"):
            if r["config_hash"] == h and not math.isnan(r["Q"]):
                done.add((r["seed"], r["t_a_ns"], r["engine"]))
    jobs = []
    for seed in cfg.seeds:
        for t in cfg.t_a:
            todo = tuple(e for e in cfg.engines if (int(seed), float(t), e) not in done)
            if todo:
                jobs.append((int(seed), float(t), todo))
    # disorder and ground references first so that workers only read them
    for seed in cfg.seeds:
        _ground(cfg, _instance(cfg, int(seed), out), out)

    n_workers = _workers(workers)
    failed = 0
    if n_workers == 1 or len(jobs) <= 1:
        results = (_job(cfg.to_dict(), s, t, e, str(out)) for s, t, e in jobs)
        for rows in results:
            for row in rows:
                failed += row["error"] is not None
                _commit(out, row)
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futs = [pool.submit(_job, cfg.to_dict(), s, t, e, str(out)) for s, t, e in jobs]
            for f in futs:
                for row in f.result():
                    failed += row["error"] is not None
                    _commit(out, row)
    rows = [r for r in read_results(out / "results.csv") if r["config_hash"] == h]
    complete = all(
        any(r["seed"] == int(s) and r["t_a_ns"] == float(t) and r["engine"] == e and not math.isnan(r["Q"]) for r in rows)
        for s in cfg.seeds for t in cfg.t_a for e in cfg.engines
    )
    return {"rows": rows, "failed": failed, "complete": complete, "output": str(out), "config_hash": h}


def aggregate(rows, engine: str):
    """Disorder average per ``t_a``: ``[(t_a, mean Q, sigma), ...]``.

    Only seeds with a valid row at every ``t_a`` enter, so a failed row
    does not shift the average at one point.  ``sigma`` combines the
    per-row statistical errors; it is zero for deterministic rows.
    """
    valid = [r for r in rows if r["engine"] == engine and not math.isnan(r["Q"])]
    grid = sorted({r["t_a_ns"] for r in rows if r["engine"] == engine})
    have = {}
    for r in valid:
        have.setdefault(r["seed"], set()).add(r["t_a_ns"])
    seeds = {s for s, ts in have.items() if ts.issuperset(grid)}
    dropped = sorted(set(have) - seeds)
    if dropped:
        log.warning("%s: seeds %s lack a valid row at some t_a and are left out of the average", engine, dropped)
    by_t = {}
    for r in valid:
        if r["seed"] in seeds:
            by_t.setdefault(r["t_a_ns"], []).append(r)
    out = []
    for t in sorted(by_t):
        rs = by_t[t]
        q = float(np.mean([r["Q"] for r in rs]))
        s = float(np.sqrt(np.sum([r["sigma_Q"] ** 2 for r in rs if np.isfinite(r["sigma_Q"])])) / len(rs))
        out.append((t, q, s))
    return out
