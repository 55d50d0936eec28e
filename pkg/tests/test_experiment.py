import json

import pytest

from gear.data import bias_label_agreement
from gear.errors import ConfigError
from gear.experiment import ABLATIONS, ExperimentConfig, prepare_data, run_experiment, summary_accuracy

SMALL = {"train": {"d_s": 8, "heads": 2, "d_text": 8, "d_hidden": 8, "max_epochs": 2, "swap_epoch": 1},
         "ood": {"k": 4, "steps": 300, "floor": 0.25}}


def _cfg(**kw):
    obj = {"synthetic": {"n_train": 60, "n_test": 40, "d_a": 4, "d_v": 4, "seed": 1}, **SMALL, **kw}
    return ExperimentConfig.from_dict(obj)


def test_exactly_one_data_source():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**SMALL})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**SMALL, "synthetic": {}, "dataset": "x"})


def test_variant_overrides_validated():
    with pytest.raises(ConfigError):
        _cfg(variants={"mine": {"learning_speed": 2}})
    cfg = _cfg(variants=["gear", "erm"])
    erm = cfg.variant_config("erm", 4)
    assert (erm.use_ipw, erm.use_gmae, erm.use_swap, erm.seed) == (False, False, False, 4)
    assert set(ABLATIONS) == {"gear", "erm", "wo_ipw", "wo_gmae", "wo_swap"}


def test_dataset_path_relative_to_config(tmp_path):
    (tmp_path / "exp.json").write_text(json.dumps({**SMALL, "dataset": "data"}))
    cfg = ExperimentConfig.load(tmp_path / "exp.json")
    assert cfg.dataset == str((tmp_path / "data").resolve())


def test_three_seeds_three_blocks(tmp_path):
    reports = run_experiment(_cfg(seeds=[0, 1, 2]), tmp_path)
    doc = json.loads((tmp_path / "report.json").read_text())
    assert len(doc["per_seed"]) == 3 and "mean" in doc
    rep = reports["gear"]
    iid = [rep.per_seed[s]["iid"]["acc2_nonneg"] for s in (0, 1, 2)]
    assert rep.mean()["iid"]["acc2_nonneg"] == pytest.approx(sum(iid) / 3)


def test_multiple_variants_layout(tmp_path):
    reports = run_experiment(_cfg(seeds=[0], variants=["gear", "erm"]), tmp_path)
    assert (tmp_path / "gear" / "seed-0" / "ckpt-best.bin").exists()
    assert (tmp_path / "erm" / "seed-0" / "ckpt-best.bin").exists()
    doc = json.loads((tmp_path / "report.json").read_text())
    assert set(doc["variants"]) == {"gear", "erm"}
    assert set(summary_accuracy(reports, "ood_tav")) == {"gear", "erm"}
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert {r.split(",")[0] for r in rows[1:]} == {"gear", "erm"}


def test_no_bias_no_gap():
    # rho=0.5 and no cluster-level label signal: nothing for the OOD sets to remove
    cfg = ExperimentConfig.from_dict({
        "synthetic": {"n_train": 1500, "n_test": 1000, "rho": 0.5, "seed": 7,
                      "robust_strength": {"text": 0.5, "audio": 0.0, "video": 0.0}},
        "train": {"max_epochs": 12, "swap_epoch": 3}, "ood": {"k": 10}, "seeds": [7]})
    data = prepare_data(cfg)
    for s in data.ood.values():
        for v in bias_label_agreement(s.records).values():
            assert abs(v - 0.5) < 0.06
    mean = run_experiment(cfg)["gear"].mean()
    for split in ("ood_audio", "ood_video"):
        assert abs(mean["iid"]["acc2_nonneg"] - mean[split]["acc2_nonneg"]) < 2.0
