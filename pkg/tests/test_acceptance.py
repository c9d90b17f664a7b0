"""One test per acceptance criterion; each prints a single PASS/FAIL line.

The lines are also gathered into an "acceptance criteria" section at the
end of the pytest run (see ``conftest.py``).
"""
import math
import time

import numpy as np
import pytest

from glogseg import cli
from glogseg.backbone import load_checkpoint, save_checkpoint
from glogseg.data import SynthConfig, synth_splits
from glogseg.filters import (GaborParams, KernelGrid, LoGParams, gabor_kernel, init_bank,
                             learnable_param_count, log_kernel, log_kernel_raw)
from glogseg.gradcheck import KERNEL_TOL, MODEL_TOL, OP_TOL, STEP, run_all
from glogseg.metrics import dice, evaluate_dataset, hd95
from glogseg.train import TrainConfig, train
from conftest import ACCEPTANCE_LINES
from test_metrics import oracle_dice, oracle_hd95, random_mask_pairs


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_1_param_counts():
    a = learnable_param_count(init_bank(2, 5))
    b = learnable_param_count(init_bank(5, 5))
    report(1, a == 15 and b == 30, f"(2,5) -> {a}, (5,5) -> {b}; expected 15 and 30")


def test_criterion_2_kernel_closed_forms():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    grid = KernelGrid(7)
    worst = dict(center=0.0, log_center=0.0, log_sum=0.0, theta_pi=0.0)
    for _ in range(200):
        lam, th, sig, gam = rng.uniform(3, 10), rng.uniform(-math.pi, math.pi), rng.uniform(1, 4), rng.uniform(0.3, 1.5)
        k0 = gabor_kernel(GaborParams.from_effective(lam, th, 0.0, sig, gam), grid)
        k1 = gabor_kernel(GaborParams.from_effective(lam, th + math.pi, 0.0, sig, gam), grid)
        worst["center"] = max(worst["center"], abs(k0[3, 3] - 1.0))
        worst["theta_pi"] = max(worst["theta_pi"], float(np.abs(k0 - k1).max()))
        s = rng.uniform(0.3, 50.0)
        raw = log_kernel_raw(LoGParams.from_effective(s), grid)
        worst["log_center"] = max(worst["log_center"], abs(raw[3, 3] + 1.0 / (math.pi * s ** 4)))
        worst["log_sum"] = max(worst["log_sum"], abs(log_kernel(LoGParams.from_effective(s), grid).sum()))
    dt = time.perf_counter() - t0
    ok = (worst["center"] == 0.0 and worst["log_center"] < 1e-12 and worst["log_sum"] < 1e-12
          and worst["theta_pi"] < 1e-12 and dt < 1.0)
    report(2, ok, "gabor center err {center:.1e}, LoG center err {log_center:.1e}, LoG sum {log_sum:.1e}, "
           "theta+pi {theta_pi:.1e}; ".format(**worst) + f"{dt:.2f}s")


def test_criterion_3_gradient_correctness():
    t0 = time.perf_counter()
    results = run_all(full=True)
    dt = time.perf_counter() - t0
    expected = {"kernel": KERNEL_TOL, "op": OP_TOL, "bank": OP_TOL, "cst_block": OP_TOL,
                "embed_forward": MODEL_TOL, "model_forward": MODEL_TOL}
    tol_ok = all(r.tol <= expected[r.name.split(":")[0]] for r in results)
    kernel_cases = sum(r.cases for r in results if r.name.startswith("kernel:"))
    total = sum(r.cases for r in results)
    worst = {}
    for r in results:
        fam = r.name.split(":")[0] if ":" in r.name else r.name
        worst[fam] = max(worst.get(fam, 0.0), r.worst)
    ok = (all(r.passed for r in results) and tol_ok and STEP == 1e-4 and kernel_cases >= 100
          and OP_TOL == 1e-5 and KERNEL_TOL == 1e-6 and MODEL_TOL == 1e-4 and dt < 60)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(3, ok, f"{total} cases ({kernel_cases} kernel draws), worst rel err: {detail}; {dt:.1f}s")


def test_criterion_4_metric_oracles():
    t0 = time.perf_counter()
    mism = 0
    n = 0
    for a, b in random_mask_pairs(200):
        n += 1
        mism += dice(a.astype(int), b.astype(int), 1) != oracle_dice(a, b)
        mism += hd95(a, b) != oracle_hd95(a, b)
    p = np.zeros((4, 4), int)
    p[0] = 1
    g = np.zeros((4, 4), int)
    g[0, :2] = 1
    d = dice(p, g, 1)
    x, y = np.zeros((8, 8), bool), np.zeros((8, 8), bool)
    x[0, 0], y[3, 4] = True, True
    h = hd95(x, y)
    empty = hd95(np.zeros((64, 64), bool), np.pad(np.ones((4, 4), bool), 30))
    dt = time.perf_counter() - t0
    ok = mism == 0 and n == 200 and round(d, 4) == 0.6667 and h == 5.0 and empty == math.hypot(63, 63) and dt < 30
    report(4, ok, f"{n} random masks, {mism} mismatches; dice {d:.4f}, hd95 {h}, empty {empty:.3f}; {dt:.1f}s")


@pytest.mark.slow
def test_criterion_5_mechanism_liveness(desk_run):
    g = desk_run.first_step_bank_grads
    live = bool(np.all(g["gabor"] != 0) and np.all(g["log"] != 0))
    moves = [max(abs(a["theta"] - b["theta"]), abs(a["wavelength"] - b["wavelength"]))
             for a, b in zip(desk_run.bank_init, desk_run.bank_final) if a["type"] == "gabor"]
    ok = live and max(moves) > 1e-3 and desk_run.wall_time < 300
    report(5, ok, f"all step-0 bank grads nonzero: {live}; largest Gabor theta/lambda move "
           f"{max(moves):.4f}; desk run {desk_run.wall_time:.0f}s, final val Dice {desk_run.val_dice[-1]:.4f}")


def test_criterion_6_ablation(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"train": {"epochs": 1, "n_gabor": 2, "n_log": 5}, "synth": {"n_train": 8, "n_val": 4}}')
    code = cli.main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "abl")])
    out = capsys.readouterr().out
    lines = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    rows = [l.split(",") for l in lines[1:]]
    variants = [r[0] for r in rows]
    extra = [int(r[3]) for r in rows]
    ok = (code == 0 and variants == ["none", "gabor", "log", "glog"] and extra == [0, 10, 5, 15]
          and (tmp_path / "abl" / "ablation.png").exists())
    ordering = out.strip().splitlines()[-1]
    report(6, ok, f"variants {variants}, extra params {extra}; ordering (not asserted): {ordering}")


def test_criterion_7_determinism_and_persistence(tmp_path):
    t0 = time.perf_counter()
    synth = SynthConfig(n_train=16, n_val=8)
    a = train(TrainConfig(epochs=2), synth)
    b = train(TrainConfig(epochs=2), synth)
    same_curves = a.losses == b.losses and a.val_dice == b.val_dice
    same_weights = all(x.data.tobytes() == y.data.tobytes()
                       for (_, x), (_, y) in zip(a.weights.named_parameters(), b.weights.named_parameters()))
    path = tmp_path / "m.glog"
    save_checkpoint(path, a.weights)
    w2, _ = load_checkpoint(path)
    _, val = synth_splits(synth)
    same_eval = evaluate_dataset(a.weights, val) == evaluate_dataset(w2, val)
    save_checkpoint(tmp_path / "n.glog", b.weights)
    same_file = path.read_bytes() == (tmp_path / "n.glog").read_bytes()
    dt = time.perf_counter() - t0
    ok = same_curves and same_weights and same_eval and same_file and dt < 60
    report(7, ok, f"curves identical {same_curves}, weights identical {same_weights}, checkpoints "
           f"byte-identical {same_file}, round-trip metrics identical {same_eval}; {dt:.1f}s")


def test_criterion_8_headline_numbers_out_of_scope():
    line = ("criterion 8: N/A   headline benchmark Dice values need the restricted clinical datasets "
            "and full-scale training; criteria 1-7 stand in for them")
    print(line)
    ACCEPTANCE_LINES.append(line)
