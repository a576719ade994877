"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Run with  pytest tests/test_acceptance.py -v -s  to see the per-criterion
lines. The transfer-learning criteria (6, 7) train many models and dominate
the runtime; every criterion stays within its stated budget on a laptop-class
machine.

The synthetic benchmarks are fixed, seeded configurations:

* overfit/separable: the default stage profiles (one dominant band per
  stage), 5 subjects x 200 epochs.
* heavy mismatch: source with default profiles; target with wider intra-stage
  variance plus a strong DomainShift (frequency warp 1.35, 0.4 cyclic band
  mixing, noise floor 0.8). Direct transfer lands near chance here.
* slight mismatch: source and target share the harder wide-variance profile;
  the shift is mild (warp 1.03, 0.05 mixing, no added floor), so direct
  transfer stays close to training from scratch.
"""

import time

import numpy as np
import pytest

from sleepseq import cli, dataio, evaluation, network, spectrogram, training, transfer
from sleepseq import numerics as nm
from sleepseq.dataio import DEFAULT_STAGE_BAND_POWER, DomainShift, SyntheticCohortConfig
from sleepseq.network import HyperParams, ModelParams
from sleepseq.training import TrainConfig
from sleepseq.transfer import Regime


def _report(criterion: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    line = f"criterion {criterion} ({name}): {status}"
    if detail:
        line += f" [{detail}]"
    print("\n" + line, flush=True)
    assert ok, line


# shared benchmark configuration -------------------------------------------

BENCH_HP = HyperParams(
    n_filters=16, ernn_hidden=16, seqrnn_hidden=16, seq_len=10,
    dropout=0.1, l2_lambda=1e-4,
)
HARD_STD = 0.45 * DEFAULT_STAGE_BAND_POWER
PRETRAIN_CFG = TrainConfig(epochs=10, batch_size=32, lr=1e-3, seed=11)
FINETUNE_CFG = TrainConfig(epochs=25, batch_size=32, lr=3e-3, eval_every=15,
                           early_stop_patience=120, seed=21)

SRC_EASY = SyntheticCohortConfig(
    n_subjects=5, epochs_per_subject=150, rng_seed=301, subject_prefix="src"
)


def _cyclic_mix(beta: float) -> np.ndarray:
    return (1.0 - beta) * np.eye(5) + beta * np.roll(np.eye(5), 1, axis=0)


HEAVY_TARGET = SyntheticCohortConfig(
    n_subjects=5, epochs_per_subject=100, rng_seed=302, subject_prefix="tgt",
    stage_band_std=HARD_STD,
    mismatch=DomainShift(freq_warp=1.35, band_mixing=_cyclic_mix(0.4), noise_floor=0.8),
)

SRC_HARD = SyntheticCohortConfig(
    n_subjects=5, epochs_per_subject=150, rng_seed=501, subject_prefix="src",
    stage_band_std=HARD_STD,
)
WEAK_TARGET = SyntheticCohortConfig(
    n_subjects=5, epochs_per_subject=70, rng_seed=502, subject_prefix="tgt",
    stage_band_std=HARD_STD,
    mismatch=DomainShift(freq_warp=1.02, band_mixing=_cyclic_mix(0.03), noise_floor=0.0),
)
# smaller target and step budget: from-scratch training must not be able to
# saturate, mirroring the data-starved small-cohort setting
WEAK_FINETUNE_CFG = TrainConfig(epochs=15, batch_size=32, lr=3e-3, eval_every=15,
                                early_stop_patience=120, seed=21)


@pytest.fixture(scope="module")
def easy_source_model():
    cohort = dataio.generate_synthetic_cohort(SRC_EASY)
    return training.pretrain(cohort, BENCH_HP, PRETRAIN_CFG)


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    hp = HyperParams(freq_bins=16, n_filters=6, ernn_hidden=4, seqrnn_hidden=4,
                     seq_len=3, dropout=0.0, l2_lambda=1e-3)
    params = ModelParams.init_random(hp, 42).astype(np.float64)
    rng = np.random.default_rng(0)
    images = rng.standard_normal((1, 3, 16, 5))
    labels = np.array([[0, 3, 2]])

    def loss_fn():
        return network.build_forward(params, images, labels=labels).loss

    worst, per_tensor = nm.finite_difference_check(loss_fn, params.tensors(), eps=1e-3)
    elapsed = time.time() - t0
    assert set(per_tensor) == set(params.names())  # every parameter group covered
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    _report(1, "gradient correctness", worst <= 1e-3,
            f"max rel err {worst:.2e} over {len(per_tensor)} tensors, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 2: shape and normalization suite
# ---------------------------------------------------------------------------


def test_criterion_2_shapes_and_normalization():
    t0 = time.time()
    rng = np.random.default_rng(1)
    ok = True
    for _ in range(5):
        image = spectrogram.stft_logpower(rng.standard_normal(3000))
        ok &= image.values.shape == (129, 29)

    logits = rng.standard_normal((1000, 5)) * 10.0
    probs = network.classify(logits, np.eye(5), np.zeros(5))
    ok &= bool(np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-6))
    ok &= bool(np.all(probs > 0))

    att = network.AttentionParams(W=rng.standard_normal((8, 8)),
                                  b=rng.standard_normal(8),
                                  u=rng.standard_normal(8))
    for _ in range(1000):
        _, alphas = network.attention_pool(rng.standard_normal((6, 8)) * 5.0, att)
        if not (np.all(alphas > 0) and abs(alphas.sum() - 1.0) <= 1e-6):
            ok = False
            break
    elapsed = time.time() - t0
    assert elapsed < 60.0
    _report(2, "shapes and normalization", ok, f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 3: oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(2)
    hp = HyperParams(n_filters=8, ernn_hidden=6, seqrnn_hidden=6, seq_len=5, dropout=0.0)
    params = ModelParams.init_random(hp, 3)
    images = rng.standard_normal((14, 129, 29)).astype(np.float32)

    fused, labels = evaluation.predict_recording(params, images)

    # oracle 1: independent window enumeration + the same fusion op; exact
    n, seq_len = 14, hp.seq_len
    decisions = [[] for _ in range(n)]
    for w in range(n - seq_len + 1):
        probs = network.predict_proba(params, images[w : w + seq_len][None])[0]
        for j in range(seq_len):
            decisions[w + j].append(probs[j])
    exact = True
    for e in range(n):
        ref = evaluation.multiplicative_fuse(np.asarray(decisions[e]))
        exact &= bool(np.array_equal(ref, fused[e]))
        exact &= labels[e] == int(np.argmax(ref))

    # oracle 2: direct-product fusion (no log space) within 1e-9
    fuse_ok = True
    for e in range(n):
        product = np.ones(5, dtype=np.float64)
        for d in decisions[e]:
            product *= np.maximum(d, 1e-12)
        product /= product.sum()
        fuse_ok &= bool(np.max(np.abs(product - fused[e])) <= 1e-9)
    # hand-computed example: [0.8, .05, .05, .05, .05] fused with itself
    p = np.array([0.8, 0.05, 0.05, 0.05, 0.05])
    hand = evaluation.multiplicative_fuse([p, p])
    fuse_ok &= abs(hand[0] - 0.64 / (0.64 + 4 * 0.0025)) <= 1e-9

    # oracle 3: metrics against a per-definition recomputation, 100 matrices
    metrics_ok = True
    for _ in range(100):
        conf = rng.integers(0, 60, size=(5, 5))
        if conf.sum() == 0:
            conf[2, 3] = 1
        rep = evaluation.compute_metrics(conf)
        c = conf.astype(float)
        total = c.sum()
        acc = np.trace(c) / total
        pe = sum(c[i, :].sum() * c[:, i].sum() for i in range(5)) / total**2
        kappa = (acc - pe) / (1 - pe)
        recalls, tnrs, f1s = [], [], []
        for k in range(5):
            tp = c[k, k]
            fn = c[k, :].sum() - tp
            fp = c[:, k].sum() - tp
            tn = total - tp - fn - fp
            rec = tp / (tp + fn) if tp + fn else 0.0
            prec = tp / (tp + fp) if tp + fp else 0.0
            f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
            recalls.append(rec)
            tnrs.append(tn / (tn + fp) if tn + fp else 0.0)
        for got, want in ((rep.accuracy, acc), (rep.kappa, kappa),
                          (rep.mf1, np.mean(f1s)), (rep.sensitivity, np.mean(recalls)),
                          (rep.specificity, np.mean(tnrs))):
            metrics_ok &= abs(got - want) <= 1e-9

    _report(3, "oracle equivalence", exact and fuse_ok and metrics_ok,
            f"sliding exact={exact}, fuse<=1e-9={fuse_ok}, metrics<=1e-9={metrics_ok}")


# ---------------------------------------------------------------------------
# criterion 4: freezing contract
# ---------------------------------------------------------------------------


def test_criterion_4_freezing_contract(easy_source_model):
    t0 = time.time()
    target = dataio.generate_synthetic_cohort(HEAVY_TARGET)
    pool = training.sequence_pool(training.prepare_recordings(target[:3]),
                                  BENCH_HP.seq_len)
    cfg = TrainConfig(epochs=10**9, batch_size=32, lr=3e-3, seed=33)
    ok = True
    details = []
    for regime in Regime:
        params = easy_source_model.copy()
        mask = transfer.mask_for(regime, BENCH_HP)
        params.set_trainable(mask)
        training.run_steps(params, pool, cfg, n_steps=100)
        for name in params.names():
            same = np.array_equal(params[name].data, easy_source_model[name].data)
            if mask[name] and same:
                ok = False
                details.append(f"{regime.value}:{name} trainable but unchanged")
            if not mask[name] and not same:
                ok = False
                details.append(f"{regime.value}:{name} frozen but changed")
    elapsed = time.time() - t0
    assert elapsed < 300.0, f"freezing contract took {elapsed:.1f}s"
    _report(4, "freezing contract", ok,
            "; ".join(details) if details else f"5 regimes x 100 steps, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 5: overfit sanity
# ---------------------------------------------------------------------------


def test_criterion_5_overfit_sanity():
    t0 = time.time()
    cohort = dataio.generate_synthetic_cohort(
        SyntheticCohortConfig(n_subjects=5, epochs_per_subject=200, rng_seed=101)
    )
    cfg = TrainConfig(epochs=10, batch_size=32, lr=1e-3, seed=5)
    params = training.pretrain(cohort, BENCH_HP, cfg)
    acc = training.cohort_accuracy(params, training.prepare_recordings(cohort))
    elapsed = time.time() - t0
    assert elapsed < 600.0, f"overfit run took {elapsed:.1f}s"
    _report(5, "overfit sanity", acc >= 0.95,
            f"train accuracy {acc:.3f} in 10 epochs, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 6: heavy-mismatch regime ordering
# ---------------------------------------------------------------------------


def test_criterion_6_heavy_mismatch_ordering(easy_source_model):
    t0 = time.time()
    target = dataio.generate_synthetic_cohort(HEAVY_TARGET)
    pooled = {}
    for regime in Regime:
        _, report = evaluation.loso_cv(target, easy_source_model, regime, FINETUNE_CFG)
        pooled[regime] = report.accuracy
    elapsed = time.time() - t0
    ent = pooled[Regime.ENTIRE_NETWORK]
    arnn = pooled[Regime.SOFTMAX_PLUS_ARNN]
    seqrnn = pooled[Regime.SOFTMAX_PLUS_SEQRNN]
    sm = pooled[Regime.SOFTMAX_ONLY]
    direct = pooled[Regime.DIRECT_TRANSFER]
    ok = (
        ent >= arnn
        and ent >= seqrnn
        and arnn > sm
        and seqrnn > sm
        and sm > direct
        and ent - direct >= 0.10
    )
    assert elapsed < 1800.0, f"heavy-mismatch benchmark took {elapsed:.1f}s"
    _report(6, "heavy-mismatch ordering", ok,
            f"ent={ent:.3f} arnn={arnn:.3f} seqrnn={seqrnn:.3f} "
            f"sm={sm:.3f} direct={direct:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 7: slight-mismatch finding
# ---------------------------------------------------------------------------


def test_criterion_7_slight_mismatch_finding():
    t0 = time.time()
    source = dataio.generate_synthetic_cohort(SRC_HARD)
    pretrained = training.pretrain(source, BENCH_HP, PRETRAIN_CFG)
    target = dataio.generate_synthetic_cohort(WEAK_TARGET)
    pooled = {}
    for regime in (Regime.DIRECT_TRANSFER, Regime.SOFTMAX_ONLY, Regime.ENTIRE_NETWORK):
        _, report = evaluation.loso_cv(target, pretrained, regime, WEAK_FINETUNE_CFG)
        pooled[regime.value] = report.accuracy
    scratch_init = ModelParams.init_random(BENCH_HP, [77, 1])
    _, scratch_report = evaluation.loso_cv(
        target, scratch_init, Regime.ENTIRE_NETWORK, WEAK_FINETUNE_CFG
    )
    pooled["scratch"] = scratch_report.accuracy
    elapsed = time.time() - t0
    gap = pooled["all"] - pooled["softmax"]
    delta = abs(pooled["direct"] - pooled["scratch"])
    ok = gap >= 0.02 and delta <= 0.05
    assert elapsed < 1800.0, f"slight-mismatch benchmark took {elapsed:.1f}s"
    _report(7, "slight-mismatch finding", ok,
            f"ent={pooled['all']:.3f} sm={pooled['softmax']:.3f} "
            f"direct={pooled['direct']:.3f} scratch={pooled['scratch']:.3f}, "
            f"gap={gap:.3f}, |direct-scratch|={delta:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 8: determinism
# ---------------------------------------------------------------------------


def test_criterion_8_determinism(tmp_path):
    tiny = ["--filters", "6", "--ernn-hidden", "4", "--seqrnn-hidden", "4",
            "--seq-len", "4", "--dropout", "0.1"]

    def run(args):
        assert cli.main([str(a) for a in args]) == 0

    ok = True
    for name in ("a", "b"):
        run(["synth", "--subjects", 3, "--epochs-per-subject", 12, "--seed", 9,
             "--out", tmp_path / f"cohort_{name}"])
        run(["pretrain", "--cohort", tmp_path / f"cohort_{name}", "--seed", 4,
             "--epochs", 2, "--batch-size", 8, *tiny,
             "--out", tmp_path / f"model_{name}.ckpt"])
        run(["eval", "--init", tmp_path / f"model_{name}.ckpt",
             "--cohort", tmp_path / f"cohort_{name}",
             "--out", tmp_path / f"report_{name}"])
    for fname in ("manifest", *(f"subj{i:03d}.rec" for i in range(3))):
        ok &= (tmp_path / "cohort_a" / fname).read_bytes() == \
              (tmp_path / "cohort_b" / fname).read_bytes()
    ok &= (tmp_path / "model_a.ckpt").read_bytes() == (tmp_path / "model_b.ckpt").read_bytes()
    ok &= (tmp_path / "report_a.txt").read_bytes() == (tmp_path / "report_b.txt").read_bytes()
    ok &= (tmp_path / "report_a.json").read_bytes() == (tmp_path / "report_b.json").read_bytes()
    _report(8, "determinism", ok, "synth + pretrain + eval bit-identical")


# ---------------------------------------------------------------------------
# criterion 9: sequence-loss unit check
# ---------------------------------------------------------------------------


def test_criterion_9_loss_unit_check():
    hp = HyperParams(freq_bins=16, n_filters=6, ernn_hidden=4, seqrnn_hidden=4,
                     seq_len=4, dropout=0.0, l2_lambda=0.0)
    params = ModelParams.init_random(hp, 7).astype(np.float64)
    params["softmax.W"].data[:] = 0.0  # uniform predictions
    params["softmax.b"].data[:] = 0.0
    images = np.random.default_rng(8).standard_normal((1, 4, 16, 5))
    labels = np.array([[0, 1, 3, 4]])
    uniform_loss = network.sequence_loss(images, labels, params, l2_lambda=0.0)
    ok = abs(uniform_loss - np.log(5.0)) <= 1e-6

    # lambda > 0 adds exactly (lambda/2) * sum(theta^2) over trainable params
    params2 = ModelParams.init_random(hp, 9).astype(np.float64)
    mask = {n: n.startswith(("softmax.", "seqrnn.")) for n in params2.names()}
    params2.set_trainable(mask)
    lam = 0.02
    base = network.sequence_loss(images, labels, params2, l2_lambda=0.0)
    with_reg = network.sequence_loss(images, labels, params2, l2_lambda=lam)
    theta_sq = sum(float(np.sum(t.data**2)) for t in params2.trainable().values())
    delta_ok = abs((with_reg - base) - lam / 2.0 * theta_sq) <= 1e-9 * max(1.0, theta_sq)
    _report(9, "sequence-loss unit check", ok and delta_ok,
            f"uniform loss {uniform_loss:.8f} vs ln5 {np.log(5.0):.8f}; "
            f"reg delta err {(with_reg - base) - lam / 2.0 * theta_sq:.2e}")
