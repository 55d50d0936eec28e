"""OOD test-set construction by discarding IID test records.

Audio and video attributes are k-means clusters of time-pooled features,
balanced per cluster by random subsampling. Text (word multisets) and the
joint TAV attribute space are balanced by simulated annealing.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from gear.data import MultimodalRecord, write_split
from gear.errors import ConfigError
from gear.kernels import get_backend
from gear.rng import make_rng

OOD_NAMES = ("ood_text", "ood_audio", "ood_video", "ood_tav")


@dataclass(frozen=True)
class CategoryScheme:
    """Binary sentiment categories: 0 = negative (y < 0), 1 = non-negative."""

    kind: str = "neg_nonneg"
    n_categories: int = 2

    def categorize(self, labels) -> np.ndarray:
        return (np.asarray(labels, dtype=np.float64) >= 0).astype(np.int64)


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0


@dataclass
class AnnealSchedule:
    t0: float = 1.0
    alpha: float = 0.999
    steps: int = 50_000


@dataclass
class AnnealState:
    selected: np.ndarray
    energy: float
    temperature: float
    step: int
    best_selected: np.ndarray
    best_energy: float
    initial_energy: float
    best_trace: np.ndarray


def kmeans_fit(features: np.ndarray, k: int, max_iters: int = 100, seed: int = 0,
               backend: str | None = None) -> ClusterModel:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint."""
    x = np.ascontiguousarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if n < k:
        raise ConfigError(f"cannot fit {k} clusters to {n} points")
    kern = get_backend(backend)
    rng = make_rng(seed, "kmeans++")
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids[c] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[c]) ** 2).sum(axis=1))

    labels, dist = kern.nearest_centroid(x, centroids)
    history = [float(dist.sum())]
    it = 0
    for it in range(1, max_iters + 1):
        centroids, counts = kern.centroid_update(x, labels, k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # re-seed each empty cluster at the point currently farthest from its centroid
            _, dist_now = kern.nearest_centroid(x, centroids[counts > 0])
            taken: set[int] = set()
            for c in empty:
                order = np.argsort(-dist_now, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                centroids[c] = x[pick]
                dist_now[pick] = 0.0
        new_labels, dist = kern.nearest_centroid(x, centroids)
        history.append(float(dist.sum()))
        if np.array_equal(new_labels, labels) and not empty.size:
            break
        labels = new_labels
    return ClusterModel(k=k, centroids=centroids, assignments=labels, inertia=history[-1],
                        inertia_history=history, n_iter=it)


def balance_clusters(assignments: np.ndarray, labels, scheme: CategoryScheme = CategoryScheme(),
                     seed: int = 0) -> tuple[np.ndarray, dict]:
    """Per cluster keep equal counts of each category; returns sorted kept indices."""
    assignments = np.asarray(assignments.assignments if isinstance(assignments, ClusterModel)
                             else assignments, dtype=np.int64)
    cats = scheme.categorize(labels)
    kept = []
    audit = {}
    for c in np.unique(assignments):
        members = np.flatnonzero(assignments == c)
        by_cat = [members[cats[members] == g] for g in range(scheme.n_categories)]
        c_min = min(len(b) for b in by_cat)
        rng = make_rng(seed, "balance", int(c))
        chosen = []
        for b in by_cat:
            chosen.append(b if len(b) == c_min else np.sort(rng.choice(b, size=c_min, replace=False)))
        kept.extend(np.concatenate(chosen).tolist())
        audit[int(c)] = {"before": [len(b) for b in by_cat], "after": [c_min] * scheme.n_categories}
    return np.array(sorted(kept), dtype=np.int64), audit


def _csr(attr_sets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, int]:
    indptr = np.zeros(len(attr_sets) + 1, dtype=np.int64)
    for i, a in enumerate(attr_sets):
        indptr[i + 1] = indptr[i] + len(a)
    flat = np.fromiter((int(v) for a in attr_sets for v in a), dtype=np.int64, count=int(indptr[-1]))
    n_attrs = int(flat.max()) + 1 if flat.size else 0
    return indptr, flat, n_attrs


def imbalance_energy(attr_sets: Sequence[Sequence[int]], cats: np.ndarray,
                     selected: np.ndarray | None = None) -> float:
    """Sum over attributes of |count_neg - count_nonneg| within the selected subset."""
    counts: dict[int, int] = {}
    for i, attrs in enumerate(attr_sets):
        if selected is not None and not selected[i]:
            continue
        s = 1 if cats[i] == 0 else -1
        for a in attrs:
            counts[a] = counts.get(a, 0) + s
    return float(sum(abs(v) for v in counts.values()))


def anneal_balance(attr_sets: Sequence[Sequence[int]], labels, scheme: CategoryScheme = CategoryScheme(),
                   schedule: AnnealSchedule = AnnealSchedule(), seed: int = 0, floor: float = 0.5,
                   backend: str | None = None) -> tuple[np.ndarray, AnnealState]:
    """Anneal a subset whose attributes are category-balanced; returns kept indices and state."""
    n = len(attr_sets)
    if not 0.0 <= floor <= 1.0:
        raise ConfigError(f"subset floor must be a fraction in [0, 1], got {floor}")
    if not 0.0 < schedule.alpha < 1.0:
        raise ConfigError("cooling factor alpha must lie in (0, 1)")
    min_size = int(math.ceil(floor * n - 1e-9))
    if min_size > n:
        raise ConfigError(f"subset floor {min_size} exceeds {n} records")
    cats = scheme.categorize(labels)
    if n == 0:
        empty = np.zeros(0, dtype=np.bool_)
        st = AnnealState(empty, 0.0, schedule.t0, 0, empty, 0.0, 0.0, np.zeros(0))
        return np.zeros(0, dtype=np.int64), st
    indptr, flat, n_attrs = _csr(attr_sets)
    rng = make_rng(seed, "anneal")
    toggles = rng.integers(0, n, size=schedule.steps).astype(np.int64)
    uniforms = rng.random(schedule.steps)
    init_e = imbalance_energy(attr_sets, cats)
    kern = get_backend(backend)
    best, best_e, final_e, trace = kern.anneal(indptr, flat, cats, n_attrs, toggles, uniforms,
                                               float(schedule.t0), float(schedule.alpha), min_size)
    best = np.asarray(best, dtype=np.bool_)
    state = AnnealState(selected=best.copy(), energy=float(final_e),
                        temperature=schedule.t0 * schedule.alpha ** schedule.steps,
                        step=schedule.steps, best_selected=best, best_energy=float(best_e),
                        initial_energy=init_e, best_trace=np.asarray(trace))
    return np.flatnonzero(best).astype(np.int64), state


@dataclass
class OODConfig:
    k: int = 100
    kmeans_iters: int = 100
    t0: float = 1.0
    alpha: float = 0.999
    steps: int = 50_000
    floor: float = 0.5
    seed: int = 0

    @classmethod
    def from_dict(cls, obj: dict) -> "OODConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ood config fields: {sorted(unknown)}")
        return cls(**obj)

    @property
    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.t0, self.alpha, self.steps)


@dataclass
class OODSet:
    name: str
    indices: np.ndarray
    records: list[MultimodalRecord]
    report: dict


def pooled(records: Sequence[MultimodalRecord], modality: str) -> np.ndarray:
    mats = [getattr(r, modality) for r in records]
    return np.stack([m.mean(axis=0) for m in mats]) if mats else np.zeros((0, 0))


def _category_counts(cats: np.ndarray) -> list[int]:
    return [int(np.sum(cats == 0)), int(np.sum(cats == 1))]


def build_ood_suite(records: Sequence[MultimodalRecord], config: OODConfig = OODConfig(),
                    backend: str | None = None) -> dict[str, OODSet]:
    """The four OOD subsets of an IID split, each with an audit report."""
    records = list(records)
    n = len(records)
    scheme = CategoryScheme()
    labels = np.array([r.label for r in records], dtype=np.float64)
    cats = scheme.categorize(labels)
    suite: dict[str, OODSet] = {}

    clusters: dict[str, np.ndarray] = {}
    for m in ("audio", "video"):
        name = f"ood_{m}"
        if n == 0:
            suite[name] = OODSet(name, np.zeros(0, dtype=np.int64), [], _empty_report(name, config))
            clusters[m] = np.zeros(0, dtype=np.int64)
            continue
        k = min(config.k, n)
        cm = kmeans_fit(pooled(records, m), k, config.kmeans_iters, seed=_sub_seed(config.seed, m),
                        backend=backend)
        clusters[m] = cm.assignments
        kept, audit = balance_clusters(cm, labels, scheme, seed=_sub_seed(config.seed, f"bal-{m}"))
        attrs = [[int(c)] for c in cm.assignments]
        sel = np.zeros(n, dtype=np.bool_)
        sel[kept] = True
        report = {
            "name": name, "method": "kmeans+balance", "k": k, "kmeans_iters": cm.n_iter,
            "inertia": cm.inertia, "n_iid": n, "n_kept": int(kept.size),
            "kept_fraction": kept.size / n,
            "initial_energy": imbalance_energy(attrs, cats),
            "final_energy": imbalance_energy(attrs, cats, sel),
            "categories_before": _category_counts(cats), "categories_after": _category_counts(cats[kept]),
            "clusters": {str(c): v for c, v in audit.items()},
        }
        suite[name] = OODSet(name, kept, [records[i] for i in kept], report)

    words = [list(r.text) for r in records]
    vocab = 1 + max((max(w) for w in words if w), default=-1)
    k_a = int(clusters["audio"].max()) + 1 if n else 0
    tav = [w + [vocab + int(clusters["audio"][i]), vocab + k_a + int(clusters["video"][i])]
           for i, w in enumerate(words)]
    for name, attrs in (("ood_text", words), ("ood_tav", tav)):
        kept, st = anneal_balance(attrs, labels, scheme, config.schedule,
                                  seed=_sub_seed(config.seed, name), floor=config.floor, backend=backend)
        report = {
            "name": name, "method": "anneal", "schedule": asdict(config.schedule), "floor": config.floor,
            "n_iid": n, "n_kept": int(kept.size), "kept_fraction": kept.size / n if n else 0.0,
            "initial_energy": st.initial_energy, "final_energy": st.best_energy,
            "categories_before": _category_counts(cats),
            "categories_after": _category_counts(cats[kept]) if n else [0, 0],
        }
        suite[name] = OODSet(name, kept, [records[i] for i in kept], report)
    return {k: suite[k] for k in OOD_NAMES}


def _sub_seed(seed: int, tag: str) -> int:
    return int(make_rng(seed, "ood", tag).integers(0, 2**62))


def _empty_report(name: str, config: OODConfig) -> dict:
    return {"name": name, "method": "kmeans+balance", "k": config.k, "n_iid": 0, "n_kept": 0,
            "kept_fraction": 0.0, "initial_energy": 0.0, "final_energy": 0.0,
            "categories_before": [0, 0], "categories_after": [0, 0], "clusters": {}}


def write_ood_suite(suite: dict[str, OODSet], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, s in suite.items():
        write_split(out / f"{name}.jsonl", s.records)
        (out / f"{name}.report.json").write_text(json.dumps(s.report, indent=2, sort_keys=True) + "\n")
    return out
