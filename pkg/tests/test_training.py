import math

import numpy as np
import pytest

from gear.data import SyntheticSpec, generate_synthetic, synthetic_manifest, to_arrays
from gear.errors import ConfigError, TrainingAborted
from gear.model import GearModel
from gear.training import (TrainConfig, binary_accuracy, compute_objective, early_stop_check,
                           erm_config, evaluate_split, train)


@pytest.mark.parametrize("bad", [{"batch_size": 0}, {"heads": 3}, {"patience": 0}, {"lam": -1.0},
                                 {"beta": -0.1}, {"ipw_c": 0.0}, {"modality_mask": []},
                                 {"modality_mask": ["smell"]}, {"strategy": "max"}, {"nope": 1}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(bad)


def test_config_defaults():
    c = TrainConfig()
    assert (c.batch_size, c.d_s, c.heads, c.lam, c.beta, c.swap_epoch, c.lr, c.patience, c.ipw_c) == \
        (32, 32, 4, 10.0, 0.3, 8, 1e-3, 8, 1.0)


def test_swap_schedule():
    c = TrainConfig(swap_epoch=3)
    assert [c.swap_active(e) for e in range(5)] == [False, False, False, True, True]
    assert not TrainConfig(swap_epoch=None).swap_active(10**6)
    assert not TrainConfig(use_swap=False, swap_epoch=0).swap_active(0)


def test_early_stop_monotone_never_stops():
    accs = list(range(30))
    assert all(early_stop_check(accs[: i + 1], 8) == "continue" for i in range(30))


def test_early_stop_flat_run():
    accs = [50.0] + [50.0] * 8
    assert early_stop_check(accs[:8], 8) == "continue"
    assert early_stop_check(accs, 8) == "stop"


def test_early_stop_single_drop_patience_one():
    assert early_stop_check([60.0, 59.0], 1) == "stop"


def test_early_stop_empty_history():
    with pytest.raises(ConfigError):
        early_stop_check([], 3)


def test_binary_accuracy_threshold():
    assert binary_accuracy(np.array([-0.1, 0.0, 1.0]), np.array([-1.0, 2.0, -1.0])) == pytest.approx(200 / 3)


def _train(tiny_data, cfg, **kw):
    manifest, train_recs, test = tiny_data
    return train(cfg, train_recs, test[:16], manifest, **kw)


def test_training_deterministic(tiny_data, tiny_cfg):
    _, h1 = _train(tiny_data, tiny_cfg)
    m2, h2 = _train(tiny_data, tiny_cfg)
    assert h1.to_json(include_time=False) == h2.to_json(include_time=False)
    assert len(h1.epochs) <= tiny_cfg.max_epochs


def test_swap_boundary_in_logged_perms(tiny_data, tiny_cfg):
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "swap_epoch": 2, "max_epochs": 4, "patience": 10})
    _, hist = _train(tiny_data, cfg, record_perms=True)
    for e in hist.epochs:
        perms = [np.array(p) for p in e["swap_perms"]]
        identity = all(np.array_equal(p, np.arange(len(p))) for p in perms)
        if e["epoch"] < 2:
            assert identity and not e["swap_active"]
        else:
            assert e["swap_active"] and not identity


def test_infinite_swap_epoch_never_swaps(tiny_data, tiny_cfg):
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "swap_epoch": None})
    _, hist = _train(tiny_data, cfg, record_perms=True)
    for e in hist.epochs:
        assert all(p == sorted(p) for p in e["swap_perms"])


def test_erm_loss_decreases():
    spec = SyntheticSpec(n_train=400, n_test=50, d_a=4, d_v=4, seed=1)
    tr, va = generate_synthetic(spec)
    cfg = erm_config(d_s=8, heads=2, d_text=8, d_hidden=8, max_epochs=5, patience=10)
    _, hist = train(cfg, tr, va, synthetic_manifest(spec))
    totals = [e["l_ipw"] for e in hist.epochs]
    assert len(totals) == 5
    assert all(b < a for a, b in zip(totals, totals[1:]))


def test_use_ipw_off_is_plain_mae(tiny_model, batch4, tiny_cfg):
    cfg = TrainConfig(**{**tiny_cfg.to_dict(), "use_ipw": False})
    bd, info = compute_objective(tiny_model, batch4, cfg)
    assert np.all(bd.ipw_factors == 1.0)
    mae = np.mean(np.abs(batch4.labels - info["y_pred"].data.ravel()))
    assert bd.l_ipw.item() == pytest.approx(mae, rel=1e-12)


def test_checkpoint_reproduces_validation_bitwise(tmp_path, tiny_data, tiny_cfg):
    manifest, _, test = tiny_data
    model, hist = _train(tiny_data, tiny_cfg, out_dir=tmp_path)
    assert (tmp_path / "ckpt-best.bin").exists() and (tmp_path / "history.json").exists()
    loaded, meta = GearModel.load(tmp_path / "ckpt-best.bin")
    a = evaluate_split(model, test[:16], manifest)
    b = evaluate_split(loaded, test[:16], manifest)
    assert np.array_equal(a, b)
    assert binary_accuracy(b, np.array([r.label for r in test[:16]])) == hist.epochs[hist.best_epoch]["val_acc"]
    assert meta["extra"]["train_config"]["seed"] == tiny_cfg.seed


def test_evaluate_empty_and_duplicates(tiny_model, tiny_data):
    manifest, train_recs, _ = tiny_data
    assert evaluate_split(tiny_model, [], manifest).shape == (0,)
    preds = evaluate_split(tiny_model, [train_recs[0], train_recs[1], train_recs[0]], manifest)
    assert preds[0] == preds[2]


def test_evaluate_chunking_invisible(tiny_model, tiny_data):
    manifest, train_recs, _ = tiny_data
    arr = to_arrays(train_recs, manifest)
    np.testing.assert_allclose(evaluate_split(tiny_model, arr, chunk=7),
                               evaluate_split(tiny_model, arr, chunk=1000), rtol=0, atol=1e-14)


def test_logged_losses_finite(tiny_data, tiny_cfg):
    _, hist = _train(tiny_data, tiny_cfg)
    for e in hist.epochs:
        for k in ("total", "l_ipw", "l_ipw_hat", "l_gmae", "l_gmae_hat"):
            assert math.isfinite(e[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(tiny_data, tiny_cfg):
    manifest, train_recs, test = tiny_data
    arr = to_arrays(train_recs, manifest)
    arr.audio[3, 0, 0] = np.nan
    with pytest.raises(TrainingAborted) as info:
        train(tiny_cfg, arr, test[:8], manifest)
    assert info.value.batch_id.startswith("epoch0-batch")
    assert train_recs[3].id in info.value.dump["record_ids"]
