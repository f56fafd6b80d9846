from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tbqkd.channel import X, Z, seeds_for
from tbqkd.hashing import seeded_hash
from tbqkd.session import (AbortReason, BlockPolicy, PulseRecords, ProtocolError,
                           SessionTranscript, audit_transcript, read_key, replay_session,
                           run_session, sift, tag_length, transmit, write_key)
from tbqkd.session.messages import Abort, Detections, Hello, PaSeed, serialize_message
from tbqkd.session.parties import Alice, Bob, fingerprint, leakage_bits, sample_positions
from tbqkd.session.records import lookup
from tbqkd.session.transport import ReplayMismatch, memory_pipe

SMALL = BlockPolicy(block_size=200_000)


@pytest.fixture(scope="module")
def session_10db():
    from tbqkd import default_setup
    config, link = default_setup()
    link = replace(link, channel_loss=10.0)
    return config, link, run_session(config, link, SMALL, seed=11)


# -- sifting ------------------------------------------------------------------

def test_sift_hand_example():
    alice = PulseRecords(slot=[2, 5, 7, 9, 12], basis=[Z, X, Z, Z, X], bit=[1, 1, 0, 1, 0],
                         intensity=[0, 1, 0, 1, 1])
    s = sift(alice, [1, 5, 7, 9, 12], [Z, X, X, Z, X])
    assert s.z_slots.tolist() == [9]
    assert s.x_slots.tolist() == [5, 12]
    assert s.alice_z.tolist() == [3] and s.bob_z.tolist() == [3]
    assert s.alice_x.tolist() == [1, 4] and s.bob_x.tolist() == [1, 4]
    assert alice.bit[1] == 0          # X records never carry a key bit


def test_sift_empty():
    alice = PulseRecords([], [], [], [])
    s = sift(alice, [], [])
    assert s.z_slots.size == 0 and s.x_slots.size == 0


@pytest.mark.parametrize("who", ["alice", "bob"])
def test_sift_rejects_duplicates(who):
    good, dup = [1, 2, 3], [1, 2, 2]
    a = PulseRecords(dup if who == "alice" else good, [0, 0, 0], [0, 0, 0], [0, 0, 0])
    with pytest.raises(ProtocolError, match="strictly increasing"):
        sift(a, dup if who == "bob" else good, [0, 0, 0])


def test_sift_against_brute_force():
    rng = np.random.default_rng(3)
    n = 10_000
    a_slots = np.sort(rng.choice(5 * n, n, replace=False))
    b_slots = np.sort(rng.choice(5 * n, n, replace=False))
    alice = PulseRecords(a_slots, rng.integers(0, 2, n), rng.integers(0, 2, n),
                         rng.integers(0, 2, n))
    b_bases = rng.integers(0, 2, n)
    s = sift(alice, b_slots, b_bases)
    a_of = {int(t): i for i, t in enumerate(a_slots)}
    z, x = [], []
    for j, t in enumerate(b_slots):
        i = a_of.get(int(t))
        if i is not None and alice.basis[i] == b_bases[j]:
            (z if b_bases[j] == Z else x).append(int(t))
    assert s.z_slots.tolist() == z and s.x_slots.tolist() == x


def test_lookup_rejects_unknown_slot():
    alice = PulseRecords([1, 4, 9], [0, 0, 0], [0, 0, 0], [0, 0, 0])
    assert lookup(alice, [4, 9]).tolist() == [1, 2]
    with pytest.raises(ProtocolError):
        lookup(alice, [5])
    with pytest.raises(ProtocolError):
        lookup(alice, [10])


# -- transmission ---------------------------------------------------------------

def test_transmit_invariants(defaults):
    config, link = defaults
    link = replace(link, channel_loss=5.0)
    t = transmit(config, link, 10**7, np.random.default_rng(0))
    a, b = t.alice, t.bob
    assert np.all(np.diff(a.slot) > 0) and a.slot.max() < 10**7
    assert np.array_equal(a.slot, b.slot)
    assert set(np.unique(a.intensity)) <= {0, 1}
    # a correct Z detection and its bit agree
    zz = (a.basis == Z) & (b.basis == Z)
    qber = np.mean(a.bit[zz] != b.outcome[zz])
    assert 0.0 < qber < 0.1
    assert np.all(t.photons >= 0)


def test_transmit_noiseless(defaults, ideal_link):
    config, _ = defaults
    t = transmit(config, ideal_link, 10**8, np.random.default_rng(1))
    a, b = t.alice, t.bob
    zz = (a.basis == Z) & (b.basis == Z)
    xx = (a.basis == X) & (b.basis == X)
    assert zz.sum() > 1000 and xx.sum() > 10
    assert np.array_equal(a.bit[zz], b.outcome[zz])
    assert not b.outcome[xx].any()


# -- full sessions ------------------------------------------------------------

def test_noiseless_session(defaults, ideal_link):
    config, _ = defaults
    r = run_session(config, ideal_link, SMALL, seed=1)
    assert not r.aborted
    assert r.key_length > 0
    assert np.array_equal(r.alice_key, r.bob_key)
    assert r.report.m_z == 0 and r.report.m_x == 0


def test_keys_equal_and_audit(session_10db):
    config, _, r = session_10db
    assert not r.aborted, r.abort_detail
    assert np.array_equal(r.alice_key, r.bob_key)
    assert r.key_length == r.report.key_length == r.bob_report.key_length > 0
    audit = audit_transcript(r.transcript)
    assert audit.sample_bits == r.sample_size
    assert audit.syndrome_bits == r.lambda_ec == int(r.report.lambda_ec)
    assert audit.tag_bits == tag_length(config.eps_cor) == 31
    assert audit.disclosed == r.sample_size + r.lambda_ec + 31
    tags = [type(m).__name__ for _, m in r.transcript.messages()]
    assert tags == ["Hello", "Detections", "BasisInfo", "XReport", "ZSample", "EcSyndrome",
                    "EcConfirm", "Tag", "TagResult", "PaSeed", "Done"]


def test_session_deterministic(session_10db):
    config, link, r = session_10db
    again = run_session(config, link, SMALL, seed=11)
    assert again.transcript.to_bytes() == r.transcript.to_bytes()
    assert np.array_equal(again.alice_key, r.alice_key)
    other = run_session(config, link, SMALL, seed=12)
    assert not np.array_equal(other.alice_key[:64], r.alice_key[:64])


def test_replay_reproduces_keys(session_10db):
    config, link, r = session_10db
    alice, bob = replay_session(r.transcript, config, link, SMALL)
    assert np.array_equal(alice.key, r.alice_key)
    assert np.array_equal(bob.key, r.bob_key)


def test_replay_detects_divergence(session_10db):
    config, link, r = session_10db
    with pytest.raises(ReplayMismatch):
        replay_session(r.transcript, config, link, replace(SMALL, sample_fraction=0.05))


def test_transcript_file_round_trip(session_10db, tmp_path):
    _, _, r = session_10db
    data = r.transcript.to_bytes()
    back = SessionTranscript.from_bytes(data)
    assert back.entries == r.transcript.entries and len(back) == 11
    with pytest.raises(ValueError):
        SessionTranscript.from_bytes(b"XXXX" + data[4:])


def test_key_file_round_trip(session_10db, tmp_path):
    _, _, r = session_10db
    path = tmp_path / "k.key"
    write_key(path, r.alice_key)
    assert np.array_equal(read_key(path), r.alice_key)
    assert path.stat().st_size == 16 + (r.key_length + 7) // 8
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(ValueError):
        read_key(path)


def test_tcp_matches_memory(session_10db):
    config, link, r = session_10db
    tcp = run_session(config, link, SMALL, "tcp", seed=11)
    assert tcp.transcript.to_bytes() == r.transcript.to_bytes()
    with pytest.raises(ValueError):
        run_session(config, link, SMALL, "carrier-pigeon", seed=11)


def test_tampered_key_is_caught(defaults):
    config, link = defaults
    link = replace(link, channel_loss=10.0)

    def flip(key):
        key[0] ^= 1
        return key

    r = run_session(config, link, SMALL, seed=11, tamper=flip)
    assert r.aborted and r.abort_reason == "correctness failure"
    assert r.alice_key is None and r.bob_key is None


def test_high_loss_has_no_key(defaults):
    config, link = defaults
    r = run_session(config, replace(link, channel_loss=35.0), BlockPolicy(block_size=100_000))
    assert r.abort_reason == "no extractable key"
    assert r.key_length == 0


def test_unreachable_block_aborts_without_exchange(defaults):
    config, link = defaults
    r = run_session(config, replace(link, channel_loss=35.0),
                    BlockPolicy(block_size=100_000, max_pulses=10**6))
    assert r.abort_reason == "no extractable key" and len(r.transcript) == 0


def _bob_against(config, link, frames):
    """Run Bob against a scripted Alice that sends ``frames`` then hangs up."""
    ta, tb = memory_pipe(timeout=5)
    for f in frames:
        ta.write(f)
    ta.close()
    bob = Bob(config, link, SMALL)
    with pytest.raises(Exception) as info:
        bob.run(tb)
    return bob, info.value


def test_fingerprint_mismatch_is_channel_abort(defaults):
    config, link = defaults
    hello = Hello(1, 0, 10**6, fingerprint(config, link) ^ 1)
    bob, exc = _bob_against(config, link, [serialize_message(hello)])
    assert bob.abort.reason is AbortReason.CHANNEL
    assert "fingerprint" in bob.abort.detail


def test_unexpected_message_is_channel_abort(defaults):
    config, link = defaults
    bob, _ = _bob_against(config, link, [serialize_message(PaSeed(1, 1))])
    assert bob.abort.reason is AbortReason.CHANNEL and "expected Hello" in bob.abort.detail


def test_peer_abort_is_propagated(defaults):
    config, link = defaults
    bob, _ = _bob_against(config, link, [serialize_message(Abort(1, "test"))])
    assert bob.abort.reason is AbortReason.NO_KEY


def test_hangup_is_channel_abort(defaults):
    config, link = defaults
    bob, _ = _bob_against(config, link, [])
    assert bob.abort.reason is AbortReason.CHANNEL


def test_alice_rejects_unknown_slots(defaults):
    config, link = defaults
    link = replace(link, channel_loss=10.0)
    ta, tb = memory_pipe(timeout=5)
    alice = Alice(config, link, SMALL, seed=0, n_pulses=10**6)
    tb.write(serialize_message(Detections([10**7], [0])))
    with pytest.raises(Exception):
        alice.run(ta)
    assert alice.abort.reason is AbortReason.CHANNEL
    first, _ = tb.recv()
    assert isinstance(first, Hello)
    reply, _ = tb.recv()
    assert isinstance(reply, Abort) and reply.code == AbortReason.CHANNEL


# -- helpers ------------------------------------------------------------------

def test_tag_length():
    assert tag_length(1e-9) == 31
    assert tag_length(0.5) == 2
    assert BlockPolicy(tag_bits=8).tag_len(None) == 8
    with pytest.raises(ValueError):
        BlockPolicy(sample_fraction=1.0)
    with pytest.raises(ValueError):
        BlockPolicy(block_size=0)


def test_tag_collision_rate():
    """Distinct keys collide on an m-bit tag with probability 2^-m."""
    rng = np.random.default_rng(99)
    m, trials = 4, 100_000
    hits = 0
    for i in range(trials):
        a = rng.integers(0, 2, 64, dtype=np.uint8)
        b = a.copy()
        b[rng.integers(64)] ^= 1
        seed = int(rng.integers(0, 2**63))
        hits += np.array_equal(seeded_hash(a, seed, m), seeded_hash(b, seed, m))
    p = 2.0**-m
    assert abs(hits - trials * p) < 5 * np.sqrt(trials * p * (1 - p))


@given(st.integers(0, 5000), st.floats(0, 0.99), st.integers(0, 2**63))
def test_sample_positions(n, fraction, seed):
    pos = sample_positions(n, fraction, seed)
    assert np.all(np.diff(pos) > 0) and (pos.size == 0 or pos.max() < n)
    expected = 0 if n == 0 or fraction == 0 else min(n, int(np.ceil(fraction * n)))
    assert pos.size == expected
    assert np.array_equal(pos, sample_positions(n, fraction, seed))


def test_leakage_bits():
    assert leakage_bits(0, 0, 10, 1.16) == 0
    assert leakage_bits(1000, 0, 100, 1.16) == 0
    assert leakage_bits(1000, 2, 100, 1.16) == int(np.ceil(1.16 * 1000 * 0.14144054824783312))
    assert leakage_bits(1000, 60, 100, 1.16) == 1000


def test_session_seed_streams_are_independent():
    a = seeds_for(5, 0).integers(0, 2**32, 8)
    b = seeds_for(5, 1).integers(0, 2**32, 8)
    assert not np.array_equal(a, b)
