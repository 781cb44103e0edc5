"""Acceptance suite: one PASS/FAIL line per criterion.

Criterion 5 trains 15 encoders and takes roughly 20-30 minutes on one core;
skip it with ``-m "not slow"``.  Run the file directly to print the lines
without pytest.
"""

import json
import math
import sys
import time

import numpy as np
import pytest

from pulselab import autodiff as ad
from pulselab import cli, graph, sde
from pulselab.model import PulseConfig, PulseModel
from pulselab.probe import EmbeddingSet, auroc_binary, embed, linear_probe
from pulselab.train import TrainConfig, cross_label_fraction, train

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # run as a script
    ACCEPTANCE_LINES = []


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1


def test_c1_shared_set_exhaustive():
    rep = graph.verify_theorem1(2, 5)
    total = sum(2 ** (2 * W) - 2 for W in range(2, 6))
    ok = rep.ok and rep.masks_checked == total and rep.elapsed < 60
    ok = ok and set(rep.case_counts) == {"left", "middle", "right"}
    report(1, ok, f"{rep.masks_checked}/{total} masks, {len(rep.counterexamples)} "
                  f"counterexamples, cases {rep.case_counts}, {rep.elapsed:.2f}s (< 60s)")


# ---------------------------------------------------------------- 2


def _op_checks(seed):
    rng = np.random.default_rng(seed)
    T = lambda *s: ad.Tensor(rng.standard_normal(s) * 0.5, requires_grad=True)  # noqa: E731

    def W(f, shape):
        R = rng.standard_normal(shape)
        return lambda *a: ad.tsum(ad.mul(f(*a), R))

    strict = {
        "linear": ad.grad_check(W(ad.linear, (4, 3)), [T(4, 5), T(3, 5), T(3)]),
        "conv-centered": ad.grad_check(W(lambda x, k, b: ad.conv1d(x, k, b, dilation=2), (2, 4, 9)),
                                       [T(2, 3, 9), T(4, 3, 3), T(4)]),
        "conv-causal": ad.grad_check(
            W(lambda x, k, b: ad.conv1d(x, k, b, dilation=1 + seed % 3, padding="same-causal"),
              (2, 4, 9)), [T(2, 3, 9), T(4, 3, 3), T(4)]),
    }
    loose = {
        "gru_cell": ad.grad_check(W(ad.gru_cell, (3, 5)),
                                  [T(3, 4), T(3, 5), T(15, 4), T(15, 5), T(15), T(15)]),
        "gru_sequence": ad.grad_check(W(ad.gru_sequence, (2, 5, 4)),
                                      [T(2, 5, 3), T(2, 4), T(12, 3), T(12, 4), T(12), T(12)]),
        "max_pool": ad.grad_check(W(ad.max_pool_time, (2, 3)), [T(2, 3, 11)]),
        "adaptive_pool": ad.grad_check(W(lambda x: ad.adaptive_max_pool_assign(x, 4), (2, 3, 11)),
                                       [T(2, 3, 11)]),
        "mse": ad.grad_check(ad.mse_sum, [T(3, 5), T(3, 5)]),
    }
    for name, fn in [("tanh", ad.tanh), ("sigmoid", ad.sigmoid), ("gelu", ad.gelu),
                     ("square", ad.square)]:
        loose[name] = ad.grad_check(W(fn, (3, 4)), [T(3, 4)])
    return strict, loose


def _model_check(seed):
    cfg = PulseConfig(channels=2, window=12, depth=2, width=4, init_kernel=3, init_hidden=4,
                      decoder_hidden=4, tv_hidden=3, tv_segments=2, pseudo_pairs=2)
    m = PulseModel(cfg, seed=seed)
    Y = np.random.default_rng(seed).standard_normal((3, 12, 2))
    tensors = [m.params[k] for k in sorted(m.params)]
    return ad.grad_check(lambda *_: m.loss_pulse(Y, [1 + seed % 6, 3]), tensors,
                         reduction="norm")


def test_c2_gradients():
    worst_strict = worst_loose = worst_model = 0.0
    for seed in range(20):
        strict, loose = _op_checks(seed)
        worst_strict = max(worst_strict, *strict.values())
        worst_loose = max(worst_loose, *loose.values())
        worst_model = max(worst_model, _model_check(seed))
    ok = worst_strict < 1e-6 and worst_loose < 1e-4 and worst_model < 1e-4
    report(2, ok, f"20 seeds; linear/conv max rel err {worst_strict:.1e} (< 1e-6), "
                  f"other ops {worst_loose:.1e} (< 1e-4), full model graph {worst_model:.1e} (< 1e-4)")


# ---------------------------------------------------------------- 3


def test_c3_heun_order():
    f = lambda y: -y  # noqa: E731
    errs = [abs(sde.heun_path(f, np.array([1.0]), round(1 / dt), dt)[-1, 0] - math.exp(-1))
            for dt in (1e-3, 5e-4)]
    ratio = errs[0] / errs[1]
    report(3, 3.6 <= ratio <= 4.4, f"error ratio {ratio:.4f} in [3.6, 4.4]")


# ---------------------------------------------------------------- 4


def test_c4_noise_calibration():
    y0 = np.array([1.0, -2.0, 2.0])
    scale = 1.0 * sde.rms(y0)  # sigma * RMS of the (constant) noiseless trajectory
    path = sde.heun_path(lambda y: np.zeros_like(y), y0, 100_000, sde.DT, scale,
                         np.random.default_rng(0))
    inc = np.diff(np.vstack([y0, path]), axis=0)
    rel = inc.std() / (scale * math.sqrt(sde.DT)) - 1
    report(4, abs(rel) < 0.05, f"increment std off by {100 * rel:+.2f}% (|.| < 5%)")


# ---------------------------------------------------------------- 5

DESK_MODEL = PulseConfig(width=32, depth=4, init_hidden=32, decoder_hidden=32, pseudo_pairs=3)
DESK_EPOCHS, DESK_BATCH, DESK_SEEDS = 10, 128, (0, 1, 2)
DESK_BUDGET_S = 45 * 60


def _desk_run(ds, variant, seed):
    st = train(ds, DESK_MODEL, TrainConfig(epochs=DESK_EPOCHS, batch_size=DESK_BATCH, seed=seed,
                                           variant=variant))
    return linear_probe(embed(st.restore_best(), ds)).accuracy


@pytest.mark.slow
def test_c5_desk_trends():
    start = time.perf_counter()
    acc = {}
    for sigma, variants in ((0.0, ("pulse",)),
                            (3.0, ("pulse", "abl-fixed-t0", "oracle-positive", "oracle-negative"))):
        for seed in DESK_SEEDS:
            ds = sde.build_dataset("lorenz", sigma, n_classes=3, W=100, trials_per_class=5,
                                   steps_per_trial=20_000, rng_seed=seed)
            for v in variants:
                acc.setdefault((sigma, v), []).append(_desk_run(ds, v, seed))
    elapsed = time.perf_counter() - start
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    a = mean[(0.0, "pulse")] >= 0.90
    b = mean[(3.0, "oracle-positive")] >= mean[(3.0, "oracle-negative")]
    c = mean[(3.0, "pulse")] >= mean[(3.0, "abl-fixed-t0")]
    fast = elapsed < DESK_BUDGET_S
    detail = (f"(a) {'ok' if a else 'no'} pulse@0 {100 * mean[(0.0, 'pulse')]:.2f}% >= 90; "
              f"(b) {'ok' if b else 'no'} pos@3 {100 * mean[(3.0, 'oracle-positive')]:.2f}% "
              f">= neg@3 {100 * mean[(3.0, 'oracle-negative')]:.2f}%; "
              f"(c) {'ok' if c else 'no'} pulse@3 {100 * mean[(3.0, 'pulse')]:.2f}% "
              f">= fixed-t0@3 {100 * mean[(3.0, 'abl-fixed-t0')]:.2f}%; "
              f"{elapsed / 60:.1f} min (< 45)")
    per_seed = {f"{v}@{s:g}": [round(x, 4) for x in xs] for (s, v), xs in acc.items()}
    print(json.dumps(per_seed))
    report(5, a and b and c and fast, detail)


# ---------------------------------------------------------------- 6

SMALL = PulseConfig(width=8, depth=3, init_kernel=3, init_hidden=8, decoder_hidden=8,
                    tv_hidden=4, tv_segments=2, pseudo_pairs=1, window=40)


@pytest.fixture(scope="module")
def small_ds():
    return sde.build_dataset("lorenz", 1.0, n_classes=3, W=40, trials_per_class=2,
                             steps_per_trial=4200, rng_seed=11)


def test_c6_ablation_machinery(small_ds):
    tc = dict(epochs=4, batch_size=32, seed=0)
    no_tv = train(small_ds, SMALL, TrainConfig(variant="abl-no-tv", **tc))
    full = train(small_ds, SMALL, TrainConfig(variant="pulse", epochs=1, batch_size=32))
    rp = train(small_ds, SMALL, TrainConfig(variant="abl-random-pairs", **tc))
    D = SMALL.width
    dims_ok = no_tv.model.decoder_input_dim == D and full.model.decoder_input_dim == D + 1
    frac, pairs = cross_label_fraction(rp.history)
    _, ltr = small_ds.subset("train")
    p = np.bincount(ltr) / len(ltr)
    expect = 1 - float(np.sum(p**2))
    se = math.sqrt(expect * (1 - expect) / pairs)
    frac_ok = abs(frac - expect) < 3 * se
    report(6, dims_ok and frac_ok,
           f"decoder input no-tv {no_tv.model.decoder_input_dim} vs full "
           f"{full.model.decoder_input_dim} (D={D}); cross-label fraction {frac:.4f} vs "
           f"{expect:.4f} +- 3*{se:.4f} over {pairs} pairs")


# ---------------------------------------------------------------- 7


def _pipeline(root):
    gen = ["--runs", str(root), "generate", "--family", "lorenz", "--sigma", "1.0",
           "--n-classes", "3", "--window", "40", "--trials", "2", "--steps", "4200", "--seed", "9"]
    assert cli.main(gen) == 0
    ds_dir = next(root.glob("*/dataset.bin")).parent
    model = {"depth": 3, "width": 8, "init_kernel": 3, "init_hidden": 8, "decoder_hidden": 8,
             "tv_segments": 2, "pseudo_pairs": 2}
    run = cli.run_train(ds_dir, model, {"epochs": 3, "batch_size": 32, "seed": 9}, root=root)
    ev = cli.run_eval(run, semi=[0.1], n_subsets=2, root=root)
    losses = [(r["train_loss"], r["val_loss"])
              for r in map(json.loads, (run / "metrics.jsonl").read_text().splitlines())]
    return {"dataset": (ds_dir / "dataset.bin").read_bytes(),
            "losses": json.dumps(losses).encode(),
            "report": (ev / "report.json").read_bytes() + (ev / "semi-0.1.json").read_bytes()
            + (ev / "results.csv").read_bytes()}


def test_c7_determinism(tmp_path):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    same = {k: a[k] == b[k] for k in a}
    report(7, all(same.values()),
           "byte-identical " + ", ".join(f"{k}={'yes' if v else 'NO'}" for k, v in same.items()))


# ---------------------------------------------------------------- 8


def test_c8_probe_sanity():
    rng = np.random.default_rng(0)
    S = 4
    split = rng.choice(np.array(["train", "test"]), size=400, p=[0.6, 0.4])
    y = np.repeat(np.arange(S), 100)
    X = rng.standard_normal((400, 6)) * 0.1
    X[np.arange(400), y] += 5.0
    sep = linear_probe(EmbeddingSet(X, y, split)).accuracy

    n = 4000
    Xr = rng.standard_normal((n, 8))
    yr = rng.integers(0, S, n)
    split_r = rng.choice(np.array(["train", "test"]), size=n, p=[0.6, 0.4])
    shuf = linear_probe(EmbeddingSet(Xr, yr, split_r)).accuracy
    n_test = int((split_r == "test").sum())
    se = math.sqrt((1 / S) * (1 - 1 / S) / n_test)

    toy = auroc_binary([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ok = sep == 1.0 and abs(shuf - 1 / S) < 3 * se and toy == 0.75
    report(8, ok, f"separable {sep:.4f} (= 1.0); shuffled {shuf:.4f} vs {1 / S:.2f} "
                  f"+- 3*{se:.4f}; toy AUROC {toy} (= 0.75)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"] + sys.argv[1:]))
