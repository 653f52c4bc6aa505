"""Posterior sampling and comparison against the exact Markov-chain oracle.

Continuous box samples are turned into a distribution over the anchors of
the query's pattern by nearest-anchor assignment with additive smoothing,
then compared with the oracle through KL(q || p_hat).  Mode coverage checks
whether any sample lands near each sufficiently likely anchor.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError
from .mapenc import stack_tokens, tokenize_map
from .sim import CategoricalDistribution, Episode, MapSnapshot, ObjectClass, TransitionModel, exact_posterior

SUMMARY_HEADER = ("class", "delta_tau", "model", "kl_mean", "kl_std", "coverage")


@dataclass(frozen=True)
class QuerySpec:
    snapshot: MapSnapshot
    query_class: ObjectClass
    descriptor: int
    delta_tau: int
    K: int
    start_index: int

    @property
    def tau_q(self) -> int:
        return self.snapshot.tau + self.delta_tau

    @classmethod
    def from_snapshot(cls, snapshot: MapSnapshot, class_name: str, delta_tau: int) -> "QuerySpec":
        obj = snapshot.find(class_name)
        return cls(snapshot, obj.obj_class, obj.descriptor, delta_tau, obj.obj_class.K, obj.pattern_index)


@dataclass(frozen=True)
class EvalConfig:
    delta_taus: tuple[int, ...] = (1, 2, 3, 5, 10)
    queries_per_cell: int = 200
    n_samples: int = 25
    coverage_samples: int = 0  # extra high-precision coverage run when > 0 (e.g. 256)
    steps: int = 10
    method: str = "midpoint"
    smoothing: float = 0.5
    mode_threshold: float = 0.05
    radius: float | None = None  # None: half the minimum inter-anchor distance
    seed: int = 0
    chunk: int = 200

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Anchors and oracle
# --------------------------------------------------------------------------


def pattern_anchors(obj_class: ObjectClass) -> tuple[np.ndarray, np.ndarray]:
    """Distinct anchor centers of a pattern and, per pattern position, its anchor row."""
    centers: list[tuple[float, float]] = []
    pos_to_anchor = []
    for c in obj_class.centers:
        if c not in centers:
            centers.append(c)
        pos_to_anchor.append(centers.index(c))
    return np.array(centers, dtype=np.float64), np.array(pos_to_anchor)


def oracle_over_anchors(query: QuerySpec, model: TransitionModel) -> CategoricalDistribution:
    """Exact posterior folded onto the pattern's distinct anchors."""
    q = exact_posterior(query.K, query.start_index, query.delta_tau, model)
    _, pos_to_anchor = pattern_anchors(query.query_class)
    folded = np.bincount(pos_to_anchor, weights=q.probs, minlength=pos_to_anchor.max() + 1)
    return CategoricalDistribution(folded / folded.sum())


def min_anchor_distance(furniture) -> float:
    pts = np.array([(f.bbox.y, f.bbox.x) for f in furniture])
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    return float(d[~np.eye(len(pts), dtype=bool)].min())


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def nearest_anchor(centers: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Index of the closest anchor for each (y, x) center; ties go to the lower index."""
    d2 = ((np.asarray(centers, dtype=np.float64)[:, None, :] - anchors[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)


def discretize(samples, anchors, smoothing: float = 0.5) -> CategoricalDistribution:
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, np.shape(samples)[-1])
    anchors = np.asarray(anchors, dtype=np.float64)
    if samples.shape[0] == 0:
        raise DomainError("cannot discretize an empty sample set")
    K = anchors.shape[0]
    if K < 1:
        raise DomainError("need at least one anchor")
    counts = np.bincount(nearest_anchor(samples[:, :2], anchors), minlength=K)
    return CategoricalDistribution((counts + smoothing) / (samples.shape[0] + K * smoothing))


def kl_divergence(q: CategoricalDistribution, p_hat: CategoricalDistribution) -> float:
    """KL(q || p_hat) in nats, with 0 * log(0 / .) = 0."""
    qp, pp = q.probs, p_hat.probs
    if qp.shape != pp.shape:
        raise DomainError(f"distributions have different lengths: {qp.size} vs {pp.size}")
    nz = qp > 0
    if np.any(pp[nz] <= 0):
        return float("inf")
    return float(np.sum(qp[nz] * np.log(qp[nz] / pp[nz])))


def mode_coverage(samples, q: CategoricalDistribution, anchors, radius: float, threshold: float = 0.05) -> np.ndarray:
    """One boolean per mode (anchor with q >= threshold), in anchor order."""
    if not radius > 0:
        raise DomainError(f"coverage radius must be positive, got {radius}")
    anchors = np.asarray(anchors, dtype=np.float64)
    modes = np.flatnonzero(q.probs >= threshold)
    centers = np.asarray(samples, dtype=np.float64).reshape(-1, np.shape(samples)[-1])[:, :2]
    if centers.shape[0] == 0:
        return np.zeros(modes.size, dtype=bool)
    d = np.sqrt(((centers[:, None, :] - anchors[None, modes, :]) ** 2).sum(-1))
    return (d <= radius).any(axis=0)


def postprocess_boxes(boxes: np.ndarray) -> np.ndarray:
    """Clamp to the unit canvas with a 1e-3 floor on height and width."""
    out = np.clip(boxes, 0.0, 1.0)
    out[..., 2:] = np.maximum(out[..., 2:], 1e-3)
    return out


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------


def build_query_grid(
    episodes: Sequence[Episode], delta_taus: Sequence[int], per_cell: int, seed: int = 0
) -> list[QuerySpec]:
    """``per_cell`` queries for each (class, delta_tau), drawn from held-out episodes."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xE7A1])))
    tau_max = episodes[0].tau_max
    queries = []
    for cls in episodes[0].classes:
        for dt in delta_taus:
            if dt > tau_max:
                raise DomainError(f"delta_tau={dt} exceeds the episode horizon {tau_max}")
            for _ in range(per_cell):
                ep = episodes[int(rng.integers(len(episodes)))]
                tau = int(rng.integers(0, tau_max - dt + 1))
                queries.append(QuerySpec.from_snapshot(ep.snapshots[tau], cls.name, dt))
    return queries


def queries_to_batch(queries: Sequence[QuerySpec], S: int) -> dict:
    return {
        "tokens": stack_tokens([tokenize_map(q.snapshot, S) for q in queries]),
        "tau": np.array([q.snapshot.tau for q in queries], dtype=np.int64),
        "tau_q": np.array([q.tau_q for q in queries], dtype=np.int64),
        "descriptor": np.array([q.descriptor for q in queries], dtype=np.int64),
    }


def sample_posterior(
    model, queries: Sequence[QuerySpec], n: int, steps: int = 10, rng: np.random.Generator | None = None,
    method: str = "midpoint", chunk: int = 200,
) -> tuple[np.ndarray, np.ndarray]:  # fmt: skip
    """(Q, n, 4) raw samples and a (Q, n) mask of samples that integrated cleanly.

    Each query draws its noise from its own child stream of ``rng``, so the
    result does not depend on ``chunk``.
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    rng = rng or np.random.default_rng(0)
    streams = rng.spawn(len(queries))
    noise = np.stack([s.standard_normal((n, 4)) for s in streams]) if queries else np.zeros((0, n, 4))
    S = model.config.tokens
    out = np.zeros((len(queries), n, 4))
    ok = np.zeros((len(queries), n), dtype=bool)
    for s in range(0, len(queries), chunk):
        sl = slice(s, s + chunk)
        batch = queries_to_batch(queries[sl], S)
        out[sl], ok[sl] = model.sample(batch, n, None, steps, method, noise=noise[sl])
    return out, ok


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    cells: list[dict] = field(default_factory=list)
    models: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "models": self.models, "cells": self.cells}, indent=2, sort_keys=True)

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / "report.json", out / "summary.csv"
        jpath.write_text(self.to_json() + "\n", encoding="utf-8")
        with open(cpath, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_HEADER)
            for c in self.cells:
                w.writerow([c["class"], c["delta_tau"], c["model"], f"{c['kl_mean']:.6f}", f"{c['kl_std']:.6f}",
                            f"{c['coverage']:.6f}"])  # fmt: skip
        return jpath, cpath


def evaluate_models(
    models: Mapping[str, object],
    episodes: Sequence[Episode],
    config: EvalConfig | None = None,
    transition: TransitionModel | None = None,
) -> EvalReport:
    config = config or EvalConfig()
    transition = transition or TransitionModel()
    queries = build_query_grid(episodes, config.delta_taus, config.queries_per_cell, config.seed)
    radius = config.radius or 0.5 * min_anchor_distance(episodes[0].furniture)
    oracles = [oracle_over_anchors(q, transition) for q in queries]
    anchors = [pattern_anchors(q.query_class)[0] for q in queries]
    report = EvalReport(config={**config.to_dict(), "radius": radius})

    for m_i, (name, model) in enumerate(models.items()):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 0x5A3, m_i])))
        raw, ok = sample_posterior(model, queries, config.n_samples, config.steps, rng, config.method, config.chunk)
        samples = postprocess_boxes(raw)
        kls, cov_frac, cov_two, dropped = [], [], [], 0
        for i, q in enumerate(queries):
            good = samples[i][ok[i]]
            dropped += int((~ok[i]).sum())
            if good.shape[0] == 0:
                kls.append(float("inf"))
                cov_frac.append(0.0)
                cov_two.append(False)
                continue
            p_hat = discretize(good, anchors[i], config.smoothing)
            kls.append(kl_divergence(oracles[i], p_hat))
            hits = mode_coverage(good, oracles[i], anchors[i], radius, config.mode_threshold)
            cov_frac.append(float(hits.mean()) if hits.size else 1.0)
            cov_two.append(int(hits.sum()) >= min(2, hits.size))
        hp_two = None
        if config.coverage_samples > 0:
            rng_hp = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 0x5A4, m_i])))
            raw_hp, ok_hp = sample_posterior(model, queries, config.coverage_samples, config.steps, rng_hp, config.method, config.chunk)
            hp = postprocess_boxes(raw_hp)
            hp_two = [
                int(mode_coverage(hp[i][ok_hp[i]], oracles[i], anchors[i], radius, config.mode_threshold).sum()) >= 2
                for i in range(len(queries))
            ]
        kls_a = np.array(kls)
        for cls in episodes[0].classes:
            for dt in config.delta_taus:
                idx = [i for i, q in enumerate(queries) if q.query_class.name == cls.name and q.delta_tau == dt]
                cell = {
                    "class": cls.name,
                    "delta_tau": dt,
                    "model": name,
                    "queries": len(idx),
                    "kl_mean": float(kls_a[idx].mean()),
                    "kl_std": float(kls_a[idx].std()),
                    "coverage": float(np.mean([cov_frac[i] for i in idx])),
                    "coverage_at_least_two": float(np.mean([cov_two[i] for i in idx])),
                }
                if hp_two is not None:
                    cell["coverage_at_least_two_hp"] = float(np.mean([hp_two[i] for i in idx]))
                report.cells.append(cell)
        d1 = [i for i, q in enumerate(queries) if q.delta_tau == 1]
        report.models[name] = {
            "kind": getattr(model, "kind", "unknown"),
            "kl_mean": float(kls_a.mean()),
            "coverage": float(np.mean(cov_frac)),
            "delta_tau_1_coverage_at_least_two": float(np.mean([cov_two[i] for i in d1])) if d1 else None,
            "samples": int(ok.size),
            "dropped_samples": dropped,
        }
    return report
