"""Desk-scale acceptance run.

Trains the four regimes on the first 10,000 MNIST training images (default CNN,
20 epochs, SGD momentum 0.9, lr 0.01, batch 128, seed 0), evaluates them on the
first 2,000 test images through the CLI, and checks each criterion. Training
takes roughly two hours on one CPU core; BIM(10)-Adv alone is most of it.

Set ADVTRAIN_ACCEPTANCE_DIR to keep the run directories and reuse them on the
next invocation. Deselect with ``-m "not acceptance"``.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, Phase, given, settings, strategies as st

from advtrain import tensor as T
from advtrain.attacks import AttackConfig, bim, check_budget, clip_to_budget, fgsm, fgsm_step, input_gradient
from advtrain.cli import main
from advtrain.config import parse_config
from advtrain.data import load_split, parse_idx_images, parse_idx_labels
from advtrain.errors import FormatError, LengthError
from advtrain.metrics import deterministic_view, read_rows
from advtrain.model import build_default_arch, checkpoint_load, checkpoint_save, init_params

from conftest import MNIST_DIR, idx_images, idx_labels, linear_model, record_criterion

pytestmark = pytest.mark.acceptance

EPS = 0.3
TRAIN_N, TEST_N, EPOCHS = 10_000, 2_000, 20
ORDER = ("vanilla", "fgsm_adv", "epoch_carried", "bim_adv")


def _have_mnist():
    return all(any((MNIST_DIR / f"{stem}{ext}").exists() for ext in ("", ".gz"))
               for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                            "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))


needs_mnist = pytest.mark.skipif(not _have_mnist(), reason=f"MNIST not found under {MNIST_DIR}")


def flags(regime, out, train_n=TRAIN_N, epochs=EPOCHS):
    return ["--regime", regime, "--data-dir", str(MNIST_DIR), "--output-dir", str(out),
            "--train-subset", str(train_n), "--test-subset", str(TEST_N), "--epochs", str(epochs),
            "--iterations", "10" if regime == "bim_adv" else "1", "--seed", "0"]


def run_dir(regime, out, **kw):
    args = flags(regime, out, **kw)
    overrides = {args[i][2:].replace("-", "_"): args[i + 1] for i in range(0, len(args), 2)}
    return out / parse_config(overrides=overrides, env={}).run_id


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    if not _have_mnist():
        pytest.skip(f"MNIST not found under {MNIST_DIR}")
    kept = os.environ.get("ADVTRAIN_ACCEPTANCE_DIR")
    out = Path(kept) if kept else tmp_path_factory.mktemp("desk")
    runs = {}
    for regime in ORDER:
        run = run_dir(regime, out)
        if not (run / "model.atnn").exists():
            assert main(["train", *flags(regime, out)]) == 0
        runs[regime] = run
    refs = [a for regime in ORDER for a in ("--run", str(runs[regime]))]
    if not (out / "evals.csv").exists():
        assert main(["evaluate", "--output-dir", str(out), *refs]) == 0
    if not (out / "curve.csv").exists():
        assert main(["intermediate-curve", "--output-dir", str(out), "--run", str(runs["vanilla"]),
                     "--run", str(runs["fgsm_adv"])]) == 0
    assert main(["report", "--output-dir", str(out), *refs]) == 0
    return out, runs


def evals(desk):
    out, runs = desk
    ids = {run.name: regime for regime, run in runs.items()}
    table = {}
    for row in read_rows(out / "evals.csv"):
        table[(ids[row.run_id], row.key)] = row.value
    return table


def seconds_per_epoch(run):
    records = json.loads((run / "epoch_records.json").read_text())
    return float(np.mean([r["seconds"] for r in records]))


def pct(value):
    return f"{100 * value:.2f}%"


# --- 1 ----------------------------------------------------------------------

_FD = {"worst": 0.0, "coords": 0, "resampled": 0}
_DEFAULT = build_default_arch()


def _sample_coords(model, x, labels, rng, per_tensor=1, n_input=2):
    targets = [("input", x.size)] * n_input
    for li, group in enumerate(model.params):
        targets += [((li, pi), p.size) for pi, p in enumerate(group) for _ in range(per_tensor)]
    coords = []
    for target, size in targets:
        for _ in range(20):
            k = int(rng.integers(0, size))
            if not T.stencil_crosses_kink(model.layers, model.params, x, target, k):
                coords.append((target, k))
                break
            _FD["resampled"] += 1
    return coords


@needs_mnist
def test_criterion_1_gradient_oracle_full_architecture():
    start = time.perf_counter()

    @settings(max_examples=4, deadline=None, derandomize=True, phases=(Phase.explicit, Phase.generate),
              database=None, suppress_health_check=list(HealthCheck))
    @given(seed=st.integers(0, 2**32 - 1))
    def check(seed):
        rng = np.random.default_rng(seed)
        model = init_params(_DEFAULT, seed % 1000, dtype=np.float64)
        x = rng.random((4, 1, 28, 28))
        labels = rng.integers(0, 10, 4)
        trace = T.forward(model.layers, model.params, x, labels)
        bundle = T.backprop(model.layers, model.params, trace)
        coords = _sample_coords(model, x, labels, rng)
        oracle = T.finite_diff_oracle(model.layers, model.params, x, labels, coords=coords, dtype=np.longdouble)
        worst = T.relative_error(bundle.input_grad, oracle.input_grad).max()
        for g, o in zip(bundle.param_grads, oracle.param_grads):
            for a, b in zip(g, o):
                worst = max(worst, T.relative_error(a, b).max())
        _FD["worst"] = max(_FD["worst"], float(worst))
        _FD["coords"] += len(coords)
        assert worst < 1e-4

    failure = None
    try:
        check()
    except AssertionError as exc:
        failure = exc
    elapsed = time.perf_counter() - start
    ok = failure is None and elapsed < 120
    record_criterion(1, "backprop vs central differences, default CNN, 4-example float64 batch", ok,
                     f"max rel err {_FD['worst']:.2e} over {_FD['coords']} coordinates "
                     f"({_FD['resampled']} kink-straddling draws resampled), {elapsed:.0f}s")
    assert failure is None, failure
    assert elapsed < 120


# --- 2 ----------------------------------------------------------------------

@needs_mnist
def test_criterion_2_attack_invariants(desk):
    _, runs = desk
    test = load_split(MNIST_DIR, "test", 500)
    worst = 0.0
    one_step_bitwise = True
    for regime in ORDER:
        model = checkpoint_load(runs[regime] / "model.atnn")
        for config in (AttackConfig.fgsm(EPS), AttackConfig.bim(EPS, 10)):
            final, snaps = bim(model, test.images, test.labels, config, capture=True)
            for snap in snaps:
                check_budget(snap, test.images, EPS)
                worst = max(worst, float(np.abs(snap.astype(np.float64) - test.images).max()))
        via_bim = bim(model, test.images[:100], test.labels[:100], AttackConfig(EPS, EPS, 1))[0]
        grad = input_gradient(model, test.images[:100], test.labels[:100])
        by_hand = clip_to_budget(fgsm_step(test.images[:100], grad, EPS), test.images[:100], EPS)
        one_step_bitwise &= via_bim.tobytes() == by_hand.tobytes() == fgsm(model, test.images[:100],
                                                                           test.labels[:100], EPS).tobytes()

    # one-class linear model: the input-gradient sign cannot flip, so BIM steps add up
    W = np.zeros((784, 10), np.float32)
    W[:, 3] = np.random.default_rng(0).choice([-0.5, 0.5], 784)
    lin = linear_model(W, input_shape=(1, 28, 28))
    grid = (np.random.default_rng(1).integers(0, 257, (64, 1, 28, 28)) / 256).astype(np.float32)
    labels = np.full(64, 3)
    linear_bitwise = all(
        bim(lin, grid, labels, AttackConfig.bim(eps, n))[0].tobytes() == fgsm(lin, grid, labels, eps).tobytes()
        for eps, n in ((0.25, 2), (0.25, 4), (0.25, 8), (0.375, 3), (0.3125, 10)))
    real = test.images[:64]
    gap = max(float(np.abs(bim(lin, real, labels, AttackConfig.bim(EPS, n))[0] - fgsm(lin, real, labels, EPS)).max())
              for n in (2, 5, 10, 30))
    ok = worst <= EPS + 1e-6 and one_step_bitwise and linear_bitwise
    record_criterion(2, "attack budget and composition identities", ok,
                     f"max |x-x0| {worst:.7f} <= 0.3 + 1e-6 on 4 models x FGSM/BIM(10) x 500 images, "
                     f"BIM(1, step=eps) == FGSM bitwise: {one_step_bitwise}, linear BIM(N, eps/N) == FGSM(eps) "
                     f"bitwise on dyadic grids: {linear_bitwise} (eps=0.3 float32 gap {gap:.1e})")
    assert ok


# --- 3 ----------------------------------------------------------------------

@needs_mnist
def test_criterion_3_single_step_models_collapse(desk):
    table = evals(desk)
    accs = {r: table[(r, 10)] for r in ("vanilla", "fgsm_adv")}
    ok = all(a < 0.10 for a in accs.values())
    record_criterion(3, "vanilla and fgsm_adv under BIM(10) below 10%", ok,
                     ", ".join(f"{r} {pct(a)}" for r, a in accs.items()))
    assert ok


# --- 4 ----------------------------------------------------------------------

@needs_mnist
def test_criterion_4_bim_adv_per_step_limit(desk):
    table = evals(desk)
    a10, a30 = table[("bim_adv", 10)], table[("bim_adv", 30)]
    ok = abs(a10 - a30) <= 0.03
    record_criterion(4, "bim_adv(10): |acc BIM(10) - acc BIM(30)| <= 3 points", ok,
                     f"BIM(10) {pct(a10)}, BIM(30) {pct(a30)}, gap {100 * abs(a10 - a30):.2f} points")
    assert ok


# --- 5 ----------------------------------------------------------------------

@needs_mnist
def test_criterion_5_intermediate_curve(desk):
    out, runs = desk
    curve = sorted((r.key, r.value) for r in read_rows(out / "curve.csv") if r.run_id == runs["vanilla"].name)
    values = [v for _, v in curve]
    rises = [b - a for a, b in zip(values, values[1:])]
    monotone = all(r <= 0.015 for r in rises)
    crossing = next((i for i, v in curve if v < 0.10), None)
    ok = len(values) == 10 and monotone and crossing is not None and crossing <= 8
    record_criterion(5, "vanilla intermediate BIM(10) curve", ok,
                     f"accuracies {' '.join(f'{100 * v:.1f}' for v in values)}; largest rise "
                     f"{100 * max(rises):.2f} points; first below 10% at iteration {crossing}")
    assert ok


# --- 6 ----------------------------------------------------------------------

@needs_mnist
def test_criterion_6_robustness_ordering(desk):
    table = evals(desk)
    carried, fgsm_adv, bim_adv = (table[(r, 10)] for r in ("epoch_carried", "fgsm_adv", "bim_adv"))
    clean = table[("epoch_carried", 0)]
    checks = [carried >= fgsm_adv + 0.30, carried >= bim_adv - 0.05, clean >= 0.97]
    record_criterion(6, "epoch_carried vs fgsm_adv / bim_adv(10) under BIM(10), clean accuracy", all(checks),
                     f"BIM(10): epoch_carried {pct(carried)}, fgsm_adv {pct(fgsm_adv)}, bim_adv(10) {pct(bim_adv)}; "
                     f"epoch_carried clean {pct(clean)}; checks {checks}")
    assert all(checks)


# --- 7 ----------------------------------------------------------------------

@needs_mnist
def test_criterion_7_timing(desk):
    _, runs = desk
    t = {r: seconds_per_epoch(runs[r]) for r in ORDER}
    ratio = t["bim_adv"] / t["epoch_carried"]
    rel = t["epoch_carried"] / t["fgsm_adv"]
    ok = ratio >= 2.5 and 1 / 1.15 <= rel <= 1.15
    record_criterion(7, "seconds per epoch", ok,
                     f"vanilla {t['vanilla']:.1f}, fgsm_adv {t['fgsm_adv']:.1f}, epoch_carried "
                     f"{t['epoch_carried']:.1f}, bim_adv(10) {t['bim_adv']:.1f}; bim/carried {ratio:.2f} (>= 2.5), "
                     f"carried/fgsm {rel:.3f} (within 1.15x)")
    assert ok


# --- 8 ----------------------------------------------------------------------

@needs_mnist
def test_criterion_8_determinism(tmp_path):
    same = []
    for regime in ORDER:
        # same output_dir both times (it is part of the manifest), so snapshot the first run
        out = tmp_path / "out" / regime
        dirs = []
        for copy in ("a", "b"):
            assert main(["train", *flags(regime, out, train_n=1000, epochs=2)]) == 0
            run = run_dir(regime, out, train_n=1000, epochs=2)
            assert main(["evaluate", "--output-dir", str(run), "--run", str(run), "--test-subset", "200",
                         "--attacks", "clean,fgsm,bim10"]) == 0
            dirs.append(run.rename(tmp_path / f"{regime}-{copy}"))
        a, b = dirs
        same.append((a / "model.atnn").read_bytes() == (b / "model.atnn").read_bytes()
                    and deterministic_view(a / "epochs.csv") == deterministic_view(b / "epochs.csv")
                    and deterministic_view(a / "evals.csv") == deterministic_view(b / "evals.csv")
                    and (a / "manifest.txt").read_bytes() == (b / "manifest.txt").read_bytes())
    ok = all(same)
    record_criterion(8, "identical config and seed reproduce artifacts", ok,
                     f"checkpoints, manifests and epochs/evals CSVs (wall_seconds column excluded) identical "
                     f"per regime {dict(zip(ORDER, same))} (1,000 train images, 2 epochs)")
    assert ok


# --- 9 ----------------------------------------------------------------------

@needs_mnist
def test_criterion_9_format_conformance(desk, tmp_path):
    raw = np.arange(3 * 28 * 28, dtype=np.uint64).reshape(3, 28, 28) % 256
    valid = idx_images(raw)
    results = {"valid images": np.array_equal(parse_idx_images(valid), raw),
               "valid labels": parse_idx_labels(idx_labels([7, 2, 1])).tolist() == [7, 2, 1]}
    wrong_magic = bytearray(valid)
    wrong_magic[3] = 0x01
    try:
        parse_idx_images(bytes(wrong_magic))
        results["wrong magic"] = False
    except LengthError:
        results["wrong magic"] = False
    except FormatError as exc:
        results["wrong magic"] = exc.offset == 0
    try:
        parse_idx_images(valid[:-1])
        results["truncated"] = False
    except LengthError as exc:
        results["truncated"] = (exc.expected, exc.actual) == (3 * 784, 3 * 784 - 1)
    try:
        parse_idx_labels(bytes([0, 0, 8, 1, 0, 0, 0, 1, 0x0B]))
        results["bad label"] = False
    except FormatError as exc:
        results["bad label"] = exc.offset == 8

    _, runs = desk
    stable = True
    for regime in ORDER:
        path = runs[regime] / "model.atnn"
        model = checkpoint_load(path)
        checkpoint_save(model, None, tmp_path / "copy.atnn")
        again = checkpoint_load(tmp_path / "copy.atnn")
        stable &= (tmp_path / "copy.atnn").read_bytes() == path.read_bytes()
        stable &= all(p.tobytes() == q.tobytes() for g, h in zip(model.params, again.params) for p, q in zip(g, h))
    results["checkpoint round trip"] = stable
    ok = all(results.values())
    record_criterion(9, "IDX fixtures and checkpoint round trip", ok,
                     ", ".join(f"{k}: {'ok' if v else 'MISMATCH'}" for k, v in results.items()))
    assert ok
