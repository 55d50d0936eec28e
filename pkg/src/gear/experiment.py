"""Experiment configs and the full run pipeline: data, OOD suite, seeds, reports."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from gear.data import (DatasetManifest, MultimodalRecord, SyntheticSpec, generate_synthetic,
                       load_dataset, read_manifest, split_validation, synthetic_manifest, to_arrays)
from gear.errors import ConfigError
from gear.metrics import MetricsReport, compute_metrics
from gear.model import GearModel, config_hash
from gear.ood import OODConfig, OODSet, build_ood_suite, write_ood_suite
from gear.training import TrainConfig, evaluate_split, train

log = logging.getLogger(__name__)

REPORT_FORMAT = "gear-report-v1"

# single-flag departures from the full method
ABLATIONS = {
    "gear": {},
    "erm": {"use_ipw": False, "use_gmae": False, "use_swap": False},
    "wo_ipw": {"use_ipw": False},
    "wo_gmae": {"use_gmae": False},
    "wo_swap": {"use_swap": False},
}


@dataclass
class ExperimentConfig:
    """One JSON file: data source, train/OOD settings, seeds, output dir.

    Set exactly one of ``synthetic`` (generator knobs) or ``dataset`` (a
    gear-v1 directory with train and test splits).
    """

    synthetic: SyntheticSpec | None = None
    dataset: str | None = None
    train_split: str = "train"
    test_split: str = "test"
    train: TrainConfig = field(default_factory=TrainConfig)
    ood: OODConfig = field(default_factory=OODConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None
    variants: dict[str, dict] = field(default_factory=lambda: {"gear": {}})

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if (self.synthetic is None) == (self.dataset is None):
            raise ConfigError("set exactly one of 'synthetic' or 'dataset'")
        if not self.variants:
            raise ConfigError("variants must be nonempty")
        for name in self.variants:
            self.variant_config(name, 0)  # validate early

    @classmethod
    def from_dict(cls, obj: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        if "synthetic" in obj and obj["synthetic"] is not None:
            obj["synthetic"] = SyntheticSpec.from_dict(obj["synthetic"])
        if obj.get("dataset") is not None and base_dir is not None:
            obj["dataset"] = str((base_dir / obj["dataset"]).resolve()) \
                if not Path(obj["dataset"]).is_absolute() else obj["dataset"]
        obj["train"] = TrainConfig.from_dict(obj.get("train", {}))
        obj["ood"] = OODConfig.from_dict(obj.get("ood", {}))
        if "seeds" in obj:
            obj["seeds"] = [int(s) for s in obj["seeds"]]
        if "variants" in obj:
            v = obj["variants"]
            missing = [n for n in (v if isinstance(v, list) else []) if n not in ABLATIONS]
            if missing:
                raise ConfigError(f"unknown variants {missing}")
            obj["variants"] = {n: ABLATIONS[n] for n in v} if isinstance(v, list) else dict(v)
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(obj, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "synthetic": self.synthetic.to_dict() if self.synthetic else None,
            "dataset": self.dataset, "train_split": self.train_split, "test_split": self.test_split,
            "train": self.train.to_dict(), "ood": dict(vars(self.ood)), "seeds": list(self.seeds),
            "variants": self.variants,
        }

    def variant_config(self, name: str, seed: int) -> TrainConfig:
        over = self.variants[name]
        unknown = set(over) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"variant {name}: unknown fields {sorted(unknown)}")
        return TrainConfig.from_dict({**self.train.to_dict(), **over, "seed": seed})


@dataclass
class PreparedData:
    manifest: DatasetManifest
    train: list[MultimodalRecord]
    test: list[MultimodalRecord]
    ood: dict[str, OODSet]

    def eval_splits(self) -> dict[str, list[MultimodalRecord]]:
        return {"iid": self.test, **{k: s.records for k, s in self.ood.items()}}


def check_inputs(cfg: ExperimentConfig) -> None:
    """Fail before any output is written if a referenced dataset is missing."""
    if cfg.dataset is None:
        return
    root = Path(cfg.dataset)
    for f in ("manifest.json", f"{cfg.train_split}.jsonl", f"{cfg.test_split}.jsonl"):
        if not (root / f).exists():
            raise ConfigError(f"dataset file not found: {root / f}")


def prepare_data(cfg: ExperimentConfig, backend: str | None = None) -> PreparedData:
    check_inputs(cfg)
    if cfg.synthetic is not None:
        train_recs, test_recs = generate_synthetic(cfg.synthetic)
        manifest = synthetic_manifest(cfg.synthetic)
    else:
        manifest = read_manifest(Path(cfg.dataset) / "manifest.json")
        manifest, train_recs = load_dataset(cfg.dataset, cfg.train_split, manifest)
        _, test_recs = load_dataset(cfg.dataset, cfg.test_split, manifest)
    return PreparedData(manifest, train_recs, test_recs, build_ood_suite(test_recs, cfg.ood, backend))


def evaluate_model(model: GearModel, data: PreparedData) -> dict[str, dict]:
    out = {}
    for split, recs in data.eval_splits().items():
        preds = evaluate_split(model, recs, data.manifest)
        out[split] = compute_metrics(preds, [r.label for r in recs])
    return out


def run_seed(cfg: TrainConfig, data: PreparedData, out_dir: Path | None = None):
    trn, val = split_validation(data.train, cfg.val_fraction, cfg.seed)
    model, hist = train(cfg, to_arrays(trn, data.manifest), to_arrays(val, data.manifest),
                        data.manifest, out_dir=out_dir)
    return model, hist, evaluate_model(model, data)


def run_experiment(cfg: ExperimentConfig, out_dir=None, backend: str | None = None
                   ) -> dict[str, MetricsReport]:
    """Train every (variant, seed); write reports when ``out_dir`` is set."""
    data = prepare_data(cfg, backend)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_ood_suite(data.ood, out / "ood")
    reports = {}
    for name in cfg.variants:
        chash = config_hash({"variant": name, "experiment": cfg.to_dict()})
        rep = MetricsReport(config_hash=chash, seeds=list(cfg.seeds))
        for seed in cfg.seeds:
            tcfg = cfg.variant_config(name, seed)
            sub = None
            if out is not None:
                sub = out / f"seed-{seed}" if len(cfg.variants) == 1 else out / name / f"seed-{seed}"
            _, hist, metrics = run_seed(tcfg, data, sub)
            log.info("variant %s seed %d: %s", name, seed,
                     {k: round(v["acc2_nonneg"], 2) for k, v in metrics.items()})
            for split, entry in metrics.items():
                rep.add(seed, split, entry)
        reports[name] = rep
    if out is not None:
        write_reports(reports, cfg, out)
    return reports


def report_json(reports: dict[str, MetricsReport], cfg: ExperimentConfig) -> dict:
    primary = next(iter(reports))
    doc = {"format": REPORT_FORMAT, "variant": primary, **reports[primary].to_json(),
           "experiment": cfg.to_dict()}
    if len(reports) > 1:
        doc["variants"] = {n: r.to_json() for n, r in reports.items()}
    return doc


def report_csv(reports: dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = None
    for name, rep in reports.items():
        rows = rep.csv_rows()
        if header is None:
            header = ["variant"] + rows[0]
            w.writerow(header)
        for r in rows[1:]:
            w.writerow([name] + r)
    return buf.getvalue()


def write_reports(reports: dict[str, MetricsReport], cfg: ExperimentConfig, out: Path) -> None:
    (out / "report.json").write_text(json.dumps(report_json(reports, cfg), indent=2, sort_keys=True) + "\n")
    (out / "report.csv").write_text(report_csv(reports))


def summary_accuracy(reports: dict[str, MetricsReport], split: str, key: str = "acc2_nonneg") -> dict[str, float]:
    return {n: float(r.mean()[split][key]) for n, r in reports.items()}

