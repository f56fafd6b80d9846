"""Acceptance criteria 1-8, one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
printed under plain ``pytest`` (output capture is bypassed for them).
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.linalg import toeplitz

from codec_fuzz import fuzz_frames, random_message
from oracles import sandwich
from tbqkd import harness
from tbqkd.channel import (dead_time_throughput, expected_observables, saturated_rate,
                           simulate_block, transmittance)
from tbqkd.finite_key import binary_entropy, hoeffding_delta, secret_key_length, tau_n
from tbqkd.hashing import available_backends, toeplitz_hash
from tbqkd.model import SyncMode, default_setup
from tbqkd.session import BlockPolicy, audit_transcript, run_session
from tbqkd.session.messages import CodecError, MESSAGE_TYPES, parse_message, serialize_message


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail
    return emit


def test_criterion_1_calibration(verdict):
    config, link = default_setup()
    t0 = time.perf_counter()
    cal = harness.calibrate(config, link)
    elapsed = time.perf_counter() - t0
    frozen = (cal.intrinsic_error == pytest.approx(link.e_intrinsic_z, rel=1e-6)
              and cal.crosstalk_coeff == pytest.approx(link.crosstalk_coeff, rel=1e-4)
              and cal.sync_crosstalk_fraction == pytest.approx(link.sync_crosstalk_fraction,
                                                               rel=1e-4)
              and cal.detection_window == pytest.approx(link.detection_window, rel=1e-4))
    skr_e = harness.analytic_skr(config, link)
    p_cut = harness.power_cutoff(config, link)
    skr_o = harness.analytic_skr(config, replace(link, sync=SyncMode.optical(-29.0)))
    ok = (abs(skr_e / 4530 - 1) <= 0.05 and abs(p_cut + 27.0) <= 0.5
          and abs(skr_o / 3400 - 1) <= 0.10 and frozen and elapsed < 300)
    verdict(1, ok, f"SKR(21 dB) {skr_e:.1f} bit/s, power cutoff {p_cut:.3f} dBm, optical sync "
                   f"{skr_o:.1f} bit/s, frozen constants reproduced: {frozen}, {elapsed:.1f} s")


def test_criterion_2_loss_cutoff(verdict):
    config, link = default_setup()
    t0 = time.perf_counter()
    table = harness.run_rate_vs_loss(harness.SweepSpec("channel_loss_db", 20.0, 32.0, 0.1),
                                     config, link)
    elapsed = time.perf_counter() - t0
    loss, skr = table.column("loss_db"), table.column("skr")
    last = max(L for L, s in zip(loss, skr) if s > 0)
    first_zero = min(L for L, s in zip(loss, skr) if s == 0)
    ok = 28.0 <= last < first_zero <= 29.0 and elapsed < 60
    verdict(2, ok, f"last positive {last} dB, first zero {first_zero} dB, {elapsed:.2f} s")


def test_criterion_3_saturation(verdict):
    config, link = default_setup()
    config = replace(config, block_size=10**7)
    counts, _ = simulate_block(config, link, seed=3)
    rate = counts.raw_z / counts.elapsed_time
    closed = saturated_rate(config, link)
    ok = rate < 1 / link.dead_time and abs(rate / closed - 1) <= 0.10
    verdict(3, ok, f"simulated Z rate {rate:.1f} counts/s, closed form {closed:.1f}, "
                   f"limit {1 / link.dead_time:.0f}")


def test_criterion_4_bound_sandwich(verdict):
    config, link = default_setup()
    config = replace(config, block_size=10**5)
    link = replace(link, channel_loss=10.0)
    trials = 10**4
    t0 = time.perf_counter()
    fails = {"s_z0": 0, "s_z1_low": 0, "phi_z_up": 0}
    for seed in range(trials):
        counts, truth = simulate_block(config, link, seed=seed)
        for name, held in sandwich(secret_key_length(counts, config), truth).items():
            fails[name] += not held
    elapsed = time.perf_counter() - t0
    rates = {k: v / trials for k, v in fails.items()}
    ok = all(r <= 1e-3 for r in rates.values()) and elapsed < 600
    verdict(4, ok, f"violation rates {rates} over {trials} blocks, {elapsed:.1f} s")


def test_criterion_5_key_agreement(verdict):
    config, link = default_setup()
    policy = BlockPolicy(block_size=200_000)
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    n, keyed, aborts, bad = 1000, 0, {}, []
    for i in range(n):
        loss = float(rng.uniform(0.0, 25.0))
        r = run_session(config, replace(link, channel_loss=loss), policy, seed=i)
        audit = audit_transcript(r.transcript)
        if audit.disclosed > r.sample_size + r.lambda_ec + r.tag_bits:
            bad.append((i, loss, "audit"))
        if r.aborted:
            aborts[r.abort_reason] = aborts.get(r.abort_reason, 0) + 1
            if r.abort_reason != "no extractable key":
                bad.append((i, loss, r.abort_reason))
            continue
        keyed += 1
        if not (np.array_equal(r.alice_key, r.bob_key)
                and r.key_length == r.report.key_length == r.bob_report.key_length):
            bad.append((i, loss, "keys"))
    elapsed = time.perf_counter() - t0
    ok = not bad and keyed > 0 and elapsed < 600
    verdict(5, ok, f"{keyed} keyed sessions with equal keys, aborts {aborts}, "
                   f"failures {bad[:5]}, {elapsed:.1f} s")


def test_criterion_6_analytic_vs_mc(verdict):
    config, link = default_setup()
    config = replace(config, block_size=10**5)
    fields = ("n_z_mu1", "n_z_mu2", "m_z_mu1", "m_z_mu2", "n_x_mu1", "n_x_mu2", "m_x_mu1",
              "m_x_mu2", "raw_z", "raw_x")
    worst, checks = 0.0, 0
    for j, loss in enumerate(np.linspace(0.0, 28.5, 20)):
        lk = replace(link, channel_loss=float(loss))
        exp = expected_observables(config, lk)
        runs = [simulate_block(config, lk, seed=1000 * j + s)[0] for s in range(20)]
        for f in fields:
            mean = np.mean([getattr(r, f) for r in runs])
            e = getattr(exp, f)
            sigma = math.sqrt(e / 20)       # Poisson bound on the binomial spread
            worst = max(worst, abs(mean - e) / sigma if sigma else abs(mean - e))
            checks += 1
    verdict(6, worst < 5.0, f"{checks} cell means, worst deviation {worst:.2f} sigma (limit 5)")


def test_criterion_7_unit_oracles(verdict):
    config, link = default_setup()
    rel = lambda a, b: abs(a - b) <= 1e-12 * abs(b)
    h11 = -0.11 * math.log2(0.11) - 0.89 * math.log2(0.89)
    tau0 = 0.7 * math.exp(-0.41) + 0.3 * math.exp(-0.15)
    tau1 = 0.7 * 0.41 * math.exp(-0.41) + 0.3 * 0.15 * math.exp(-0.15)
    eta_z = 10 ** -2.1 * 0.9 * 0.5 * 0.2
    checks = {
        "binary_entropy": binary_entropy(0.5) == 1.0 and rel(binary_entropy(0.11), h11),
        "tau_n": rel(tau_n(0, config), tau0) and rel(tau_n(1, config), tau1),
        "hoeffding_delta": rel(hoeffding_delta(1e6, 1e-9), math.sqrt(5e5 * math.log(1e9))),
        "dead_time_throughput": rel(dead_time_throughput(174e3, 20e-6), 174e3 / (1 + 3.48)),
        "transmittance": rel(transmittance(link, "Z"), eta_z),
    }
    seed = [1, 0, 1, 1, 0]
    hand = all(toeplitz_hash([1, 1, 0, 0], seed, 2, b).tolist() == [0, 1]
               and toeplitz_hash([1, 0, 0, 1], seed, 2, b).tolist() == [1, 1]
               for b in available_backends())
    rng = np.random.default_rng(7)
    brute = True
    for _ in range(50):
        n = int(rng.integers(1, 400))
        m = int(rng.integers(1, n + 1))
        x = rng.integers(0, 2, n)
        s = rng.integers(0, 2, n + m - 1)
        want = (toeplitz(c=s[:m], r=s[m - 1:]) @ x) % 2
        brute &= all(np.array_equal(toeplitz_hash(x, s, m, b), want)
                     for b in available_backends())
    checks["toeplitz_hash"] = hand and brute
    verdict(7, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'MISMATCH'}"
                                               for k, v in checks.items()))


def test_criterion_8_codec(verdict):
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    accepted, crashes = 0, []
    for frame in fuzz_frames(rng, 10**6):
        try:
            msg = parse_message(frame)
        except CodecError:
            continue
        except Exception as exc:            # noqa: BLE001 - any other exception is a crash
            crashes.append(repr(exc))
            continue
        accepted += 1
        if serialize_message(msg) != frame:
            crashes.append("accepted frame is not canonical")
    seen, trips = set(), True
    for _ in range(5000):
        msg = random_message(rng)
        seen.add(msg.TAG)
        trips &= parse_message(serialize_message(msg)) == msg
    elapsed = time.perf_counter() - t0
    ok = not crashes and trips and seen == set(MESSAGE_TYPES)
    verdict(8, ok, f"10^6 fuzzed frames, {accepted} accepted, crashes {crashes[:3]}, "
                   f"round trip on all {len(seen)} message types: {trips}, {elapsed:.1f} s")
