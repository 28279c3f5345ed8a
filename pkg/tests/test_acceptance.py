"""Acceptance suite: one test per criterion, each with its runtime limit.

A PASS/FAIL line per criterion is printed in the terminal summary (see the
hooks in conftest.py).
"""

import csv
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import padded_grad, random_batch
from sigattn.analysis import gradcheck_attention, jacobian_norm_probe, rel_err, sigmoid_derivative_scan
from sigattn.bench import BenchConfig, attention_flops, blocked_impl, emit_report, make_bench_batch, measure
from sigattn.bench import padding_overhead, read_report
from sigattn.cli import main
from sigattn.jagged import JaggedBatch
from sigattn.kernel import TileConfig, blocked_backward_dkdv, blocked_backward_dq, blocked_forward
from sigattn.lab import EncoderConfig, EncoderModel, MarkovTokenStream, model_gradcheck, validation_loss_mc
from sigattn.lab.train import LOG_COLUMNS
from sigattn.mmd import bootstrap_mmd, gaussian_mixture_embeddings, mmd2, median_heuristic, write_mmd_table
from sigattn.mmd import pairwise_mmd_table
from sigattn.reference import AttentionConfig, dense_backward, dense_forward

SIG = AttentionConfig()


@contextmanager
def time_limit(seconds):
    t0 = time.perf_counter()
    yield
    elapsed = time.perf_counter() - t0
    print(f"elapsed {elapsed:.1f}s (limit {seconds}s)")
    assert elapsed < seconds, f"took {elapsed:.1f}s, limit {seconds}s"


def _ceil(a, b):
    return -(-a // b)


# ---------------------------------------------------------------- 1


# Each config runs three kernels in two precisions.  The tile-visit budget
# keeps the pure-numpy kernels inside the runtime limit; configs over budget
# (large L with tiny blocks) are redrawn, and the tally below shows that every
# block size and padding level is still exercised.
VISIT_BUDGET = 6000


def _draw_config(rng):
    while True:
        Z, H = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        L = int(rng.integers(1, 257))
        D = int(rng.choice([8, 64]))
        bm, bn = (int(x) for x in rng.choice([1, 8, 16, 64], 2))
        pad = float(rng.choice([0.0, 0.25, 0.5, 0.9]))
        if 3 * Z * H * _ceil(L, bm) * _ceil(L, bn) <= VISIT_BUDGET:
            return Z, H, L, D, bm, bn, pad


@pytest.mark.slow
def test_criterion_01_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = {"single": 0.0, "double": 0.0}
    seen_b, seen_p = set(), set()
    with time_limit(120):
        for _ in range(200):
            Z, H, L, D, bm, bn, pad = _draw_config(rng)
            seen_b |= {bm, bn}
            seen_p.add(pad)
            # trailing padding of the requested fraction, jittered per sequence
            base = max(1, round(L * (1 - pad)))
            n = np.clip(base - rng.integers(0, max(1, L // 8), Z), 1, L)
            b64 = random_batch(rng, Z, L, H, D, n_q=n)
            dO64 = padded_grad(b64, rng)
            tiles = TileConfig(bm, bn)
            for prec, dtype, tol in (("single", np.float32, 1e-5), ("double", np.float64, 1e-10)):
                b = b64.astype(dtype)
                dO = dO64.astype(dtype)
                # the double oracle sees exactly the rounded inputs the kernel sees
                ref = b.astype(np.float64)
                want_o = dense_forward(ref, SIG)
                want = dense_backward(ref, SIG, dO.astype(np.float64))
                o, _ = blocked_forward(b, SIG, tiles)
                dq, _ = blocked_backward_dq(b, SIG, tiles, dO)
                dk, dv, _ = blocked_backward_dkdv(b, SIG, tiles, dO)
                errs = [rel_err(o, want_o), *(rel_err(g, w) for g, w in zip((dq, dk, dv), want))]
                worst[prec] = max(worst[prec], *errs)
                assert max(errs) <= tol, (prec, Z, H, L, D, bm, bn, pad, errs)
    print(f"200 configs; worst single {worst['single']:.2e}, double {worst['double']:.2e}")
    assert seen_b == {1, 8, 16, 64} and seen_p == {0.0, 0.25, 0.5, 0.9}


# ---------------------------------------------------------------- 2


def test_criterion_02_gradient_correctness():
    rng = np.random.default_rng(7)
    worst = 0.0
    with time_limit(60):
        for i in range(40):
            Z, H, L = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 9))
            D = int(rng.integers(1, 5))
            b = random_batch(rng, Z, L, H, D)
            tiles = TileConfig(int(rng.choice([1, 2, 4, 8])), int(rng.choice([1, 2, 4, 8])))
            rep = gradcheck_attention(b, SIG, tiles, h=1e-5, seed=i, fail_above=None)
            worst = max(worst, rep.worst)
            assert rep.worst <= 1e-6, (i, rep.to_dict())
        model_worst = {}
        for mech in ("sigmoid", "softmax"):
            cfg = EncoderConfig(layers=1, d_model=8, heads=2, vocab_size=11, max_len=6, mechanism=mech,
                                init_std=0.5, block_m=2, block_n=4)
            model = EncoderModel.init(cfg, 3)
            batch = next(iter(MarkovTokenStream(11, 6, 3, 0.3, seed=4)))
            errs = model_gradcheck(model, batch, h=1e-5)
            model_worst[mech] = max(errs.values())
            assert model_worst[mech] <= 1e-5, (mech, errs)
    print(f"kernel gradcheck worst {worst:.2e}; model {model_worst}")


# ---------------------------------------------------------------- 3


def test_criterion_03_theory_verification():
    rng = np.random.default_rng(3)
    scales = [1.0, 10.0, 100.0]
    sig_max, sig_offdiag, soft_min_offdiag = 0.0, 0.0, math.inf
    with time_limit(30):
        for _ in range(10_000):
            n = int(rng.integers(2, 17))
            rep = jacobian_norm_probe(rng.standard_normal(n), scales)
            sig_max = max(sig_max, *rep.sigmoid_max_diag, *rep.sigmoid_spectral_norms)
            sig_offdiag = max(sig_offdiag, *rep.sigmoid_max_offdiag)
            soft_min_offdiag = min(soft_min_offdiag, rep.softmax_max_offdiag[0])
        peak, at = sigmoid_derivative_scan(np.linspace(-10, 10, 20001))
    print(f"sigmoid max entry {sig_max:.6f}, max off-diag {sig_offdiag}, softmax min coupling {soft_min_offdiag:.3e}")
    assert sig_offdiag == 0.0
    assert sig_max <= 0.25
    assert soft_min_offdiag > 0
    assert at == 0.0 and abs(peak - 0.25) <= 1e-15


# ---------------------------------------------------------------- 4


def test_criterion_04_padding_semantics():
    rng = np.random.default_rng(4)
    with time_limit(30):
        for trial in range(10):
            Z, H, L, D = 3, 2, int(rng.integers(8, 70)), 4
            n = rng.integers(1, L + 1, Z)
            b = random_batch(rng, Z, L, H, D, n_q=n)
            dO = padded_grad(b, rng)
            bm, bn = (int(x) for x in rng.choice([1, 4, 8, 16], 2))
            tiles = TileConfig(bm, bn)
            o, fs = blocked_forward(b, SIG, tiles)
            dq, qs = blocked_backward_dq(b, SIG, tiles, dO)
            dk, dv, ks = blocked_backward_dkdv(b, SIG, tiles, dO)

            qpad = ~b.query_mask()
            kpad = ~b.key_mask()
            for fill in (np.nan, np.inf, 1e30, -7.0):
                q, k, v, g = b.q.copy(), b.k.copy(), b.v.copy(), dO.copy()
                q[qpad], k[kpad], v[kpad], g[qpad] = fill, fill, fill, fill
                mb = JaggedBatch(q, k, v, b.n_q, b.n_k)
                o2, _ = blocked_forward(mb, SIG, tiles)
                dq2, _ = blocked_backward_dq(mb, SIG, tiles, g)
                dk2, dv2, _ = blocked_backward_dkdv(mb, SIG, tiles, g)
                for x, y in ((o, o2), (dq, dq2), (dk, dk2), (dv, dv2)):
                    assert np.array_equal(x, y), (trial, fill)

            assert np.all(o[qpad] == 0.0) and np.all(dq[qpad] == 0.0)
            assert np.all(dk[kpad] == 0.0) and np.all(dv[kpad] == 0.0)

            nqb, nkb = _ceil(L, bm), _ceil(L, bn)
            for s in (fs, qs):
                assert s.total_query_blocks == H * Z * nqb
                assert s.skipped_query_blocks == H * sum(nqb - _ceil(int(x), bm) for x in n)
                assert s.skipped_key_block_visits == H * sum(_ceil(int(x), bm) * (nkb - _ceil(int(x), bn)) for x in n)
            assert ks.total_key_blocks == H * Z * nkb
            assert ks.skipped_key_blocks == H * sum(nkb - _ceil(int(x), bn) for x in n)
            assert ks.skipped_query_block_visits == H * sum(_ceil(int(x), bn) * (nqb - _ceil(int(x), bm)) for x in n)
    print("10 batches x 4 pad fills: bitwise identical; skip counters match closed form")


# ---------------------------------------------------------------- 5


FLOP_TABLE = [
    (1, 1, 2, 1), (1, 1, 1, 1), (2, 3, 5, 7), (1, 16, 512, 64), (1, 16, 512, 128),
    (32, 16, 512, 64), (16, 16, 1024, 64), (8, 16, 2048, 128), (4, 32, 4096, 64), (2, 16, 8192, 128),
    (1, 16, 16384, 128), (1, 16, 16384, 64), (1, 1, 100_000, 1), (3, 7, 11, 13), (64, 8, 256, 32),
    (1, 128, 32768, 128), (5, 5, 5, 5), (1, 2, 3, 4), (10, 10, 10, 10), (1, 16, 65536, 256),
]


def test_criterion_05_flop_accounting():
    assert len(FLOP_TABLE) == 20
    assert attention_flops(1, 1, 2, 1) == 16
    assert attention_flops(1, 1, 2, 1, "backward") == 40
    for b, h, n, d in FLOP_TABLE:
        fwd = attention_flops(b, h, n, d, "forward")
        bwd = attention_flops(b, h, n, d, "backward")
        assert fwd == 4 * b * h * n * n * d and isinstance(fwd, int)
        assert bwd == 10 * b * h * n * n * d and isinstance(bwd, int)
        assert attention_flops(b, h, 2 * n, d) == 4 * fwd
        assert attention_flops(b, h, 2 * n, d, "backward") == 4 * bwd
    print("20 configs exact; flops(2n) = 4 flops(n) in both directions")


# ---------------------------------------------------------------- 6


def test_criterion_06_padding_overhead():
    v = padding_overhead(438.4, 397.5)
    print(f"padding_overhead(438.4, 397.5) = {v:.6f}")
    assert abs(v - 0.0933) <= 1e-4


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_07_bench_methodology(tmp_path):
    cfg = BenchConfig(seq_lengths=(2048,), token_budget=16384, head_dims=(64,), hidden_dim=64,
                      padding_fractions=(0.5,), iterations=5, warmup_ms=100)
    b = cfg.batch_size(2048)
    assert b == 8
    batch, dO = make_bench_batch(b, 2048, cfg.hidden_dim // 64, 64, 0.5, seed=0)
    assert batch.n_q.tolist() == [1024] * 8
    tiles = TileConfig(64, 64)
    recs = []
    with time_limit(120):
        for direction in ("forward", "backward"):
            fn = blocked_impl(direction, SIG, dO)
            skip = measure(fn, batch, tiles, direction, cfg, name="blocked", padding=0.5)
            noskip = measure(fn, batch, TileConfig(64, 64, skip_padded_blocks=False), direction, cfg,
                             name="blocked_noskip", padding=0.5)
            print(f"{direction}: skip {skip.mean_s * 1e3:.1f} ms +- {skip.ci_s * 1e3:.1f}, "
                  f"no-skip {noskip.mean_s * 1e3:.1f} ms +- {noskip.ci_s * 1e3:.1f}")
            assert skip.mean_s < noskip.mean_s
            recs += [skip, noskip]
    for fmt in ("csv", "json"):
        path = emit_report(recs, fmt, tmp_path / f"r.{fmt}")
        assert read_report(path) == recs


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_criterion_08_stability_lab(tmp_path):
    with time_limit(300):
        rc = main(["stability", "--paired", "--steps", "500", "--clip", "1.0", "--out", str(tmp_path)])
    assert rc == 0
    logs = {}
    for mech in ("softmax", "sigmoid"):
        with open(tmp_path / f"stability_{mech}.csv", newline="") as fh:
            reader = csv.DictReader(fh)
            assert tuple(reader.fieldnames) == LOG_COLUMNS
            logs[mech] = list(reader)
        assert len(logs[mech]) == 500
        for col in ("loss", "global_grad_norm", "layer0_max_abs_score"):
            assert all(math.isfinite(float(r[col])) for r in logs[mech])
        post = max(float(r["post_clip_grad_norm"]) for r in logs[mech])
        assert post <= 1.0 + 1e-6, (mech, post)
    deriv = max(float(r["layer0_max_weight_derivative"]) for r in logs["sigmoid"])
    assert deriv <= 0.25
    assert [r["batch_hash"] for r in logs["softmax"]] == [r["batch_hash"] for r in logs["sigmoid"]]
    print(f"500 paired steps; max sigmoid weight derivative {deriv:.4f}; batch hashes identical")


# ---------------------------------------------------------------- 9


def _head_only_model(head_b):
    # vocabulary: pad, mask and two symbols; a zero head makes logits = head_b
    model = EncoderModel.init(EncoderConfig(layers=1, d_model=4, heads=1, vocab_size=4, max_len=16), 0)
    model.params["head_w"][:] = 0.0
    model.params["head_b"][:] = head_b
    return model


def test_criterion_09_validation_protocol():
    hb = np.array([0.0, 0.0, math.sqrt(2), -math.pi / 5])
    model = _head_only_model(hb)
    lse = math.log(sum(math.exp(x) for x in hb))
    seqs = [np.full(7, 2), np.full(4, 3), np.array([2, 3, 3, 2, 3, 2, 2, 3, 2, 3])]
    res = validation_loss_mc(model, seqs, trials=15, mask_prob=0.15, seed=11)
    assert res.trials == 15
    assert abs(res.per_sequence[0] - (lse - hb[2])) <= 1e-12
    assert abs(res.per_sequence[1] - (lse - hb[3])) <= 1e-12
    # 10 maskable tokens mask exactly one per trial: the mean is lse - (k b2 + (15-k) b3)/15
    fits = [k for k in range(16) if abs(res.per_sequence[2] - (lse - (k * hb[2] + (15 - k) * hb[3]) / 15)) <= 1e-12]
    assert len(fits) == 1
    again = validation_loss_mc(model, seqs, trials=15, mask_prob=0.15, seed=11)
    assert np.array_equal(res.per_sequence, again.per_sequence) and res.mean == again.mean
    print(f"hand oracle matched; mixed sequence masked symbol 2 in {fits[0]}/15 trials")


# ---------------------------------------------------------------- 10


def _triple_loop(a, b, bw):
    def k(x, y):
        return math.exp(-sum((xi - yi) ** 2 for xi, yi in zip(x, y)) / (2 * bw * bw))

    xx = sum(k(x, y) for x in a for y in a) / len(a) ** 2
    yy = sum(k(x, y) for x in b for y in b) / len(b) ** 2
    xy = sum(k(x, y) for x in a for y in b) / (len(a) * len(b))
    return xx + yy - 2 * xy


def test_criterion_10_mmd_suite(tmp_path):
    rng = np.random.default_rng(10)
    with time_limit(120):
        a = rng.standard_normal((20, 5))
        assert mmd2(a, a) == 0.0
        worst_bf, worst_scale = 0.0, 0.0
        for _ in range(30):
            n, m = int(rng.integers(1, 21)), int(rng.integers(1, 21))
            x, y = rng.standard_normal((n, 3)), rng.standard_normal((m, 3)) * 1.3 + 0.4
            bw, _ = median_heuristic(np.vstack([x, y]))
            v = mmd2(x, y)
            worst_bf = max(worst_bf, abs(v - _triple_loop(x.tolist(), y.tolist(), bw)))
            c = float(rng.uniform(1e-2, 1e2))
            worst_scale = max(worst_scale, abs(mmd2(c * x, c * y) - v) / max(abs(v), 1e-300))
        assert worst_bf <= 1e-12
        assert worst_scale <= 1e-9

        sets = gaussian_mixture_embeddings(n_labels=8, points_per_label=30, dim=8, seed=1)
        r1 = bootstrap_mmd(sets[0], sets[1], resamples=1000, seed=5)
        r2 = bootstrap_mmd(sets[0], sets[1], resamples=1000, seed=5)
        assert np.array_equal(r1.bootstrap_samples, r2.bootstrap_samples)
        assert (r1.point_estimate, r1.ci_lower, r1.ci_upper) == (r2.point_estimate, r2.ci_lower, r2.ci_upper)

        rows = pairwise_mmd_table(sets, resamples=1000, seed=0)
        p1 = write_mmd_table(rows, tmp_path / "a.csv")
        p2 = write_mmd_table(pairwise_mmd_table(sets, resamples=1000, seed=0), tmp_path / "b.csv")
    assert p1.read_bytes() == p2.read_bytes()
    with open(p1, newline="") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 28
    assert set(table[0]) >= {"pair", "estimate", "ci_lower", "ci_upper", "bandwidth"}
    print(f"brute force {worst_bf:.1e}, rescaling {worst_scale:.1e}; 28-row table bitwise reproducible")
