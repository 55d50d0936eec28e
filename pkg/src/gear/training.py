"""Training loop: routed objective, swap schedule, early stopping, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from gear.autodiff import Adam, Tape, backward, detach, mean, mul
from gear.data import MODALITIES, ArrayBatch, DatasetManifest, MultimodalRecord, batch_indices, to_arrays
from gear.errors import ConfigError, NumericError, TrainingAborted
from gear.losses import BiasWeightStrategy, LossBreakdown, bias_weight, gmae, ipw_factor, mae, total_loss
from gear.model import GearModel, ModelConfig, config_hash, swap_biased
from gear.rng import make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    d_s: int = 32
    heads: int = 4
    lam: float = 10.0
    beta: float = 0.3
    swap_epoch: int | None = 8          # None: never swap
    lr: float = 1e-3
    max_epochs: int = 30
    patience: int = 8
    strategy: str = "min"
    strategy_eps: float = 1e-3
    ipw_c: float = 1.0
    seed: int = 0
    use_ipw: bool = True
    use_gmae: bool = True
    use_swap: bool = True
    modality_mask: tuple[str, ...] = MODALITIES
    independent_swap: bool = False
    val_fraction: float = 0.1
    d_text: int = 32
    d_hidden: int = 32

    def __post_init__(self):
        self.modality_mask = tuple(self.modality_mask)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.heads < 1 or self.d_s % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d_s={self.d_s}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.lam < 0 or self.beta < 0:
            raise ConfigError("lam and beta must be >= 0")
        if self.ipw_c <= 0:
            raise ConfigError("ipw_c must be > 0")
        if not self.modality_mask or set(self.modality_mask) - set(MODALITIES):
            raise ConfigError(f"modality_mask must be a nonempty subset of {MODALITIES}")
        if self.swap_epoch is not None and self.swap_epoch < 0:
            raise ConfigError("swap_epoch must be >= 0")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        BiasWeightStrategy(self.strategy, self.strategy_eps)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modality_mask"] = list(self.modality_mask)
        return d

    @property
    def bias_strategy(self) -> BiasWeightStrategy:
        return BiasWeightStrategy(self.strategy, self.strategy_eps)

    def model_config(self, manifest: DatasetManifest) -> ModelConfig:
        return ModelConfig.for_manifest(manifest, d_s=self.d_s, heads=self.heads,
                                        d_text=self.d_text, d_hidden=self.d_hidden)

    def swap_active(self, epoch: int) -> bool:
        return self.use_swap and self.swap_epoch is not None and epoch >= self.swap_epoch


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def val_accuracies(self) -> list[float]:
        return [e["val_acc"] for e in self.epochs]

    def to_json(self, include_time: bool = True) -> dict:
        epochs = self.epochs if include_time else [
            {k: v for k, v in e.items() if k != "wall_time"} for e in self.epochs]
        return {"epochs": epochs, "best_epoch": self.best_epoch, "stopped_early": self.stopped_early}


def compute_objective(model: GearModel, batch: ArrayBatch, cfg: TrainConfig,
                      swap_rng: np.random.Generator | None = None, swap_enabled: bool = False
                      ) -> tuple[LossBreakdown, dict]:
    """Forward one batch through both paths and assemble the total objective."""
    y = batch.labels
    lat = model.encode(batch)
    swap_biased(lat, swap_rng, swap_enabled, independent=cfg.independent_swap)
    feats = model.disentangle(lat)

    l_gmae, l_gmae_hat, errs = [], [], {}
    bias_loss = gmae if cfg.use_gmae else mae
    for m in MODALITIES:
        y_b = model.predict_bias(m, feats.biased[m])
        errs[m] = detach(mae(y, y_b))
        l_gmae.append(mean(bias_loss(y, y_b)))
        if feats.biased_swapped[m] is feats.biased[m]:
            l_gmae_hat.append(l_gmae[-1])
        else:
            y_bh = model.predict_bias(m, feats.biased_swapped[m])
            l_gmae_hat.append(mean(bias_loss(lat.labels_swapped[m], y_bh)))

    psi = bias_weight(np.stack([errs[m] for m in cfg.modality_mask], axis=-1), cfg.bias_strategy)

    f_o = model.fuse_robust(feats.robust["text"], feats.robust["audio"], feats.robust["video"])
    y_pred = model.predict_sentiment(f_o)
    err = mae(y, y_pred)
    factor = ipw_factor(psi, detach(err), cfg.ipw_c) if cfg.use_ipw else np.ones_like(y)
    l_ipw = mean(mul(err, factor))

    if all(feats.robust_swapped[m] is feats.robust[m] for m in MODALITIES):
        l_ipw_hat = l_ipw
    else:
        fr = feats.robust_swapped
        y_hat = model.predict_sentiment(model.fuse_robust(fr["text"], fr["audio"], fr["video"]))
        # swapped samples keep their own label on the robust path
        l_ipw_hat = mean(mul(mae(y, y_hat), factor))

    bd = total_loss(l_ipw, l_gmae, l_ipw_hat, l_gmae_hat, cfg.lam, cfg.beta,
                    bias_weights=psi, ipw_factors=factor)
    info = {"swap_perm": lat.swap_perm, "latents": lat, "features": feats, "y_pred": y_pred}
    return bd, info


def early_stop_check(history, patience: int) -> str:
    """'stop' once validation accuracy has not improved for ``patience`` epochs."""
    accs = history.val_accuracies() if isinstance(history, TrainHistory) else list(history)
    if not accs:
        raise ConfigError("early_stop_check needs a nonempty history")
    best = int(np.argmax(accs))
    return "stop" if len(accs) - 1 - best >= patience else "continue"


def binary_accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean((preds < 0) == (labels < 0)) * 100.0)


def evaluate_split(model: GearModel, records, manifest: DatasetManifest | None = None,
                   chunk: int = 512) -> np.ndarray:
    """Deterministic robust-path predictions for each record."""
    arrays = records if isinstance(records, ArrayBatch) else None
    if arrays is None:
        if len(records) == 0:
            return np.zeros(0)
        arrays = to_arrays(records, manifest)
    if len(arrays) == 0:
        return np.zeros(0)
    out = [model.predict(arrays.take(np.arange(s, min(s + chunk, len(arrays)))))
           for s in range(0, len(arrays), chunk)]
    return np.concatenate(out)


def _check_finite(bd: LossBreakdown, where: str, ids: list[str] | None = None) -> None:
    vals = [bd.total.item(), bd.l_ipw.item(), bd.l_ipw_hat.item()]
    vals += [t.item() for t in bd.l_gmae] + [t.item() for t in bd.l_gmae_hat]
    if not all(math.isfinite(v) for v in vals):
        raise TrainingAborted(f"non-finite loss at {where}", batch_id=where,
                              dump={"record_ids": ids, "losses": vals, "bias_weights": bd.bias_weights.tolist(),
                                    "ipw_factors": bd.ipw_factors.tolist()})


def train(cfg: TrainConfig, train_records: Sequence[MultimodalRecord] | ArrayBatch,
          val_records: Sequence[MultimodalRecord] | ArrayBatch, manifest: DatasetManifest,
          out_dir=None, record_perms: bool = False, on_epoch_end=None) -> tuple[GearModel, TrainHistory]:
    """Fit the model; returns it restored to the best-validation epoch.

    ``on_epoch_end(model, entry)`` is called after each epoch's validation
    and may add keys to ``entry``.
    """
    tr = train_records if isinstance(train_records, ArrayBatch) else to_arrays(train_records, manifest)
    va = val_records if isinstance(val_records, ArrayBatch) else to_arrays(val_records, manifest)
    model = GearModel(cfg.model_config(manifest), seed=cfg.seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    history = TrainHistory()
    best_state, best_acc = model.state_dict(), -math.inf
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_meta = {"train_config": cfg.to_dict(), "config_hash": config_hash(cfg.to_dict())}

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        swap_on = cfg.swap_active(epoch)
        swap_rng = make_rng(cfg.seed, "swap", epoch)
        sums: dict[str, float] = {}
        perms = []
        n_batches = 0
        for b, idx in enumerate(batch_indices(len(tr), cfg.batch_size, cfg.seed, True, epoch)):
            batch = tr.take(idx)
            where = f"epoch{epoch}-batch{b}"
            with Tape():
                try:
                    bd, info = compute_objective(model, batch, cfg, swap_rng, swap_on)
                except NumericError as exc:
                    raise TrainingAborted(f"{exc} at {where}", batch_id=where,
                                          dump={"record_ids": batch.ids}) from exc
                _check_finite(bd, where, batch.ids)
                grads = backward(bd.total)
            opt.step(grads)
            for k, v in bd.scalars().items():
                v = float(np.sum(v)) if isinstance(v, list) else v
                sums[k] = sums.get(k, 0.0) + v
            if record_perms:
                perms.append(info["swap_perm"]["text"].tolist())
            n_batches += 1
        val_acc = binary_accuracy(evaluate_split(model, va), va.labels) if len(va) else 0.0
        entry = {"epoch": epoch, "swap_active": swap_on, "val_acc": val_acc,
                 **{k: v / max(n_batches, 1) for k, v in sums.items()},
                 "wall_time": time.perf_counter() - t0}
        if record_perms:
            entry["swap_perms"] = perms
        if on_epoch_end is not None:
            on_epoch_end(model, entry)
        history.epochs.append(entry)
        if val_acc > best_acc:
            best_acc = val_acc
            best_state = model.state_dict()
            history.best_epoch = epoch
            if out is not None:
                model.save(out / "ckpt-best.bin", extra=ckpt_meta)
        log.info("epoch %d total=%.4f val_acc=%.2f swap=%s", epoch, entry.get("total", float("nan")),
                 val_acc, swap_on)
        if early_stop_check(history, cfg.patience) == "stop":
            history.stopped_early = True
            break

    model.load_state_dict(best_state)
    if out is not None:
        if history.best_epoch < 0:
            model.save(out / "ckpt-best.bin", extra=ckpt_meta)
        (out / "history.json").write_text(json.dumps(history.to_json(), indent=2) + "\n")
    return model, history


def erm_config(**kw) -> TrainConfig:
    """The debiasing control: plain MAE everywhere, no swap."""
    return TrainConfig(use_ipw=False, use_gmae=False, use_swap=False, **kw)
