"""Binary accuracy and weighted F1 under the neg/nonneg and neg/pos formulations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gear.errors import ContractError, UndefinedMetricError

METRIC_KEYS = ("acc2_nonneg", "f1_nonneg", "acc2_pos", "f1_pos")


def _weighted_f1(pred_cls: np.ndarray, true_cls: np.ndarray) -> float:
    n = len(true_cls)
    score = 0.0
    for c in (0, 1):
        support = int(np.sum(true_cls == c))
        if support == 0:
            continue
        tp = int(np.sum((pred_cls == c) & (true_cls == c)))
        fp = int(np.sum((pred_cls == c) & (true_cls != c)))
        fn = support - tp
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        score += support / n * f1
    return score


def _binary(pred_cls: np.ndarray, true_cls: np.ndarray) -> tuple[float, float]:
    acc = float(np.mean(pred_cls == true_cls))
    return acc * 100.0, _weighted_f1(pred_cls, true_cls) * 100.0


def compute_metrics(preds, labels) -> dict:
    """Metrics for real-valued predictions thresholded at 0.

    Class 0 is negative (< 0). The neg/pos block drops zero labels; a zero
    prediction counts as nonneg/pos.
    """
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ContractError(f"preds ({p.size}) and labels ({y.size}) differ in length")
    if y.size == 0:
        raise UndefinedMetricError("no samples to score")
    pc, yc = (p >= 0).astype(np.int8), (y >= 0).astype(np.int8)
    acc_nn, f1_nn = _binary(pc, yc)
    keep = y != 0
    if not keep.any():
        raise UndefinedMetricError("every label is zero; neg/pos formulation is empty")
    acc_p, f1_p = _binary(pc[keep], yc[keep])
    return {"acc2_nonneg": acc_nn, "f1_nonneg": f1_nn, "acc2_pos": acc_p, "f1_pos": f1_p,
            "n_total": int(y.size), "n_excluded_zero": int(np.sum(~keep))}


def mean_metrics(entries: list[dict]) -> dict:
    if not entries:
        raise ContractError("mean of zero metric entries")
    out = {k: float(np.mean([e[k] for e in entries])) for k in METRIC_KEYS}
    out["n_total"] = entries[0]["n_total"]
    out["n_excluded_zero"] = entries[0]["n_excluded_zero"]
    return out


@dataclass
class MetricsReport:
    """Per-seed split metrics plus their mean."""

    config_hash: str
    seeds: list[int]
    per_seed: dict[int, dict[str, dict]] = field(default_factory=dict)

    def add(self, seed: int, split: str, entry: dict) -> None:
        self.per_seed.setdefault(seed, {})[split] = entry

    @property
    def splits(self) -> list[str]:
        first = self.per_seed[self.seeds[0]] if self.seeds and self.seeds[0] in self.per_seed else {}
        return list(first)

    def mean(self) -> dict[str, dict]:
        return {s: mean_metrics([self.per_seed[sd][s] for sd in self.seeds]) for s in self.splits}

    def to_json(self) -> dict:
        return {"config_hash": self.config_hash, "seeds": list(self.seeds),
                "per_seed": [{"seed": sd, "splits": self.per_seed[sd]} for sd in self.seeds],
                "mean": self.mean()}

    def csv_rows(self) -> list[list[str]]:
        """Table layout: one row per (seed|mean, split), slash-joined pairs."""
        rows = [["seed", "split", "acc_nonneg/acc_pos", "f1_nonneg/f1_pos", "n_total", "n_excluded_zero"]]

        def row(tag, split, e):
            return [tag, split, f"{e['acc2_nonneg']:.2f}/{e['acc2_pos']:.2f}",
                    f"{e['f1_nonneg']:.2f}/{e['f1_pos']:.2f}", str(e["n_total"]), str(e["n_excluded_zero"])]

        for sd in self.seeds:
            for split, e in self.per_seed[sd].items():
                rows.append(row(str(sd), split, e))
        for split, e in self.mean().items():
            rows.append(row("mean", split, e))
        return rows
