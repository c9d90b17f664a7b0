import json
import math

import numpy as np
import pytest

from glogseg.backbone import load_checkpoint, save_checkpoint
from glogseg.data import SynthConfig, generate_samples, stack, synth_generate, synth_splits
from glogseg.metrics import evaluate_dataset
from glogseg.optim import AdamWState, adamw_step
from glogseg.train import (ABLATION_VARIANTS, TrainConfig, TrainingDiverged, ablation_ordering_holds,
                           config_from_dict, config_to_dict, load_config, run_ablation, train,
                           write_ablation_csv)

SMALL = SynthConfig(n_train=8, n_val=4)


def smoothed(values, window=3):
    return np.convolve(values, np.ones(window) / window, mode="valid")


# -- data ---------------------------------------------------------------------

def test_same_seed_bit_identical():
    a, b = synth_generate(SMALL), synth_generate(SMALL)
    for s, t in zip(a, b):
        assert s.image.tobytes() == t.image.tobytes() and s.labels.tobytes() == t.labels.tobytes()
    c = synth_generate(SynthConfig(n_train=8, n_val=4, seed=1))
    assert not np.array_equal(a[0].image, c[0].image)


def test_class_histogram_covers_every_class():
    cfg = SynthConfig()
    counts = np.zeros(cfg.n_classes, int)
    for s in generate_samples(cfg, 100, seed=0):
        counts += np.bincount(s.labels.ravel(), minlength=cfg.n_classes)
        # the generator's own record agrees with the label map
        assert {c for _, c in s.meta["shapes"]} >= set(np.unique(s.labels)) - {0}
    assert np.all(counts > 0)


def test_flat_noise_free_image_is_piecewise_constant():
    cfg = SynthConfig(n_classes=2, frequencies=(0.0, 0.0), orientations=(0.0, 0.0), noise_sigma=0.0,
                      n_train=5, n_val=0)
    for s in synth_generate(cfg):
        for c in np.unique(s.labels):
            region = s.image[s.labels == c]
            # each pasted shape gets its own phase, so a class may hold a few constants
            assert len(np.unique(region)) <= 3


def test_split_sizes_and_stack():
    tr, va = synth_splits(SMALL)
    assert len(tr) == 8 and len(va) == 4
    imgs, labels = stack(tr)
    assert imgs.shape == (8, 1, 64, 64) and labels.shape == (8, 64, 64)
    assert labels.dtype == np.int64


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_classes=1, frequencies=(0.0,), orientations=(0.0,))
    with pytest.raises(ValueError):
        SynthConfig(frequencies=(0.0, 0.1))


# -- optimizer ----------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_noop():
    p = [np.array([1.5, -2.0])]
    adamw_step(p, [np.zeros(2)], AdamWState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p[0], [1.5, -2.0])


def test_adamw_decoupled_decay_once():
    p = [np.array([1.5, -2.0])]
    adamw_step(p, [np.zeros(2)], AdamWState(), lr=0.01, weight_decay=0.1)
    np.testing.assert_array_equal(p[0], np.array([1.5, -2.0]) * (1 - 0.001))


def test_adamw_three_steps_vs_scalar_reference():
    lr, wd, b1, b2, eps = 0.05, 0.01, 0.9, 0.999, 1e-8
    grads = [0.3, -1.2, 0.7]
    x, m, v = 2.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        x = x - lr * wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = [np.array([2.0])]
    state = AdamWState()
    for g in grads:
        adamw_step(p, [np.array([g])], state, lr=lr, weight_decay=wd)
    assert abs(p[0][0] - x) < 1e-12 and state.step == 3


# -- configs --------------------------------------------------------------------

def test_config_round_trip_and_rejection(tmp_path):
    tc, sc = TrainConfig(epochs=3), SynthConfig(n_train=10)
    raw = config_to_dict(tc, sc)
    assert config_from_dict(json.loads(json.dumps(raw))) == (tc, sc)
    with pytest.raises(ValueError, match="unknown keys in train"):
        config_from_dict({"train": {"epochs": 1, "momentum": 0.9}})
    with pytest.raises(ValueError, match="unknown top-level"):
        config_from_dict({"model": {}})
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"epochs": 2}}))
    assert load_config(path)[0].epochs == 2


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0), dict(kernel_size=4),
                dict(n_gabor=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- training -----------------------------------------------------------------

def test_one_epoch_smoke():
    rep = train(TrainConfig(epochs=1), SMALL)
    assert len(rep.losses) == 1 and len(rep.val_dice) == 1
    assert math.isfinite(rep.losses[0])
    assert len(rep.bank_init) == len(rep.bank_final) == 7


def test_same_seed_identical_curves():
    a = train(TrainConfig(epochs=2), SMALL)
    b = train(TrainConfig(epochs=2), SMALL)
    assert a.losses == b.losses and a.val_dice == b.val_dice
    for (_, x), (_, y) in zip(a.weights.named_parameters(), b.weights.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch_and_batch():
    with pytest.raises(TrainingDiverged, match=r"epoch 0, batch \d+"):
        train(TrainConfig(epochs=1, learning_rate=1e300), SynthConfig(n_train=16, n_val=0, noise_sigma=1e300))


def test_checkpoint_round_trip_identical_metrics(tmp_path):
    rep = train(TrainConfig(epochs=1), SMALL)
    path = tmp_path / "m.glog"
    save_checkpoint(path, rep.weights, config_to_dict(rep.train_cfg, rep.synth_cfg))
    w2, meta = load_checkpoint(path)
    _, val = synth_splits(SMALL)
    assert evaluate_dataset(rep.weights, val) == evaluate_dataset(w2, val)
    assert config_from_dict(meta) == (rep.train_cfg, rep.synth_cfg)


def test_ablation_structure(tmp_path):
    rows = run_ablation(TrainConfig(epochs=1, n_gabor=2, n_log=5), SMALL)
    assert tuple(r["variant"] for r in rows) == ABLATION_VARIANTS == ("none", "gabor", "log", "glog")
    assert [r["extra_params"] for r in rows] == [0, 10, 5, 15]
    assert isinstance(ablation_ordering_holds(rows), bool)
    write_ablation_csv(tmp_path / "a.csv", rows)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0].startswith("variant,n_gabor,n_log,extra_params") and len(lines) == 5


@pytest.mark.slow
def test_desk_run_quality(desk_run):
    rep = desk_run
    assert len(rep.losses) == 30 and len(rep.val_dice) == 30
    assert rep.val_dice[-1] >= 0.85
    s = smoothed(rep.losses[:10])
    assert np.all(np.diff(s) < 0)


@pytest.mark.slow
def test_desk_run_filters_move(desk_run):
    moved = max(max(abs(a["theta"] - b["theta"]), abs(a["wavelength"] - b["wavelength"]))
                for a, b in zip(desk_run.bank_init, desk_run.bank_final) if a["type"] == "gabor")
    assert moved > 1e-3
    g = desk_run.first_step_bank_grads
    assert np.all(g["gabor"] != 0) and np.all(g["log"] != 0)
