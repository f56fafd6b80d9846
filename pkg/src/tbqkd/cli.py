"""Command-line entry point: ``tbqkd <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 protocol abort.
"""
from __future__ import annotations

import argparse
import logging
import multiprocessing as mp
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .channel import BlockUnreachable, DriftProfile
from .finite_key import REPORT_COLUMNS
from .model import SyncMode, ValidationError, load_config, default_setup, validate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3

log = logging.getLogger("tbqkd")


class ConfigError(Exception):
    pass


def _common(p: argparse.ArgumentParser, mode_default: str = "analytic") -> None:
    p.add_argument("--config", type=Path,
                   help="JSON configuration (default: built-in parameter set)")
    p.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    p.add_argument("--out", type=Path, help="output CSV path (default: standard output)")
    p.add_argument("--mode", choices=harness.MODES, default=mode_default)
    p.add_argument("--loss", type=float, help="override channel loss in dB")
    p.add_argument("--sync", choices=("electrical", "optical"), help="override sync mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbqkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rate-vs-loss", help="secret key rate against channel loss")
    _common(p)
    p.add_argument("--start", type=float, default=0.0)
    p.add_argument("--stop", type=float, default=30.0)
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--blocks", type=int, default=1, help="blocks per point (mc/session)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("rate-vs-power", help="secret key rate against classical power")
    _common(p)
    p.add_argument("--start", type=float, default=-40.0)
    p.add_argument("--stop", type=float, default=-25.0)
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("stability", help="per-interval rates under slow drift")
    _common(p, mode_default="mc")
    p.add_argument("--duration", type=float, default=4 * 3600.0, help="seconds")
    p.add_argument("--interval", type=float, default=600.0, help="seconds")
    p.add_argument("--loss-amplitude", type=float, default=0.0, help="dB, sinusoidal")
    p.add_argument("--loss-period", type=float, default=86400.0, help="seconds")
    p.add_argument("--visibility-amplitude", type=float, default=0.0)
    p.add_argument("--visibility-period", type=float, default=86400.0)
    p.add_argument("--loss-step", action="append", default=[], metavar="T:DB",
                   help="add DB of loss from T seconds on (repeatable)")

    p = sub.add_parser("session", help="one full Alice/Bob session")
    _common(p, mode_default="session")
    p.add_argument("--block-size", type=int, default=harness.SESSION_BLOCK_SIZE,
                   help="target sifted Z detections")
    p.add_argument("--sample-fraction", type=float, default=0.02)
    p.add_argument("--transport", choices=("memory", "tcp"), default="memory")
    p.add_argument("--two-process", action="store_true",
                   help="run Bob in a separate process over localhost TCP")
    p.add_argument("--key-dir", type=Path, help="directory for key and transcript files")

    p = sub.add_parser("calibrate", help="fit and print the derived device constants")
    _common(p)
    return parser


def _load(args) -> tuple:
    try:
        config, link = load_config(args.config) if args.config else default_setup()
        if args.loss is not None:
            link = replace(link, channel_loss=args.loss)
        if args.sync == "optical":
            link = replace(link, sync=SyncMode.optical())
        elif args.sync == "electrical":
            link = replace(link, sync=SyncMode.electrical())
        return validate(config, link)
    except (ValidationError, OSError) as exc:
        raise ConfigError(str(exc)) from exc


def _emit(table: harness.Table, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(table.to_csv())
    else:
        table.write(out)
        log.info("wrote %s", out)


def _sweep(args, parameter: str, runner) -> int:
    config, link = _load(args)
    try:
        spec = harness.SweepSpec(parameter, args.start, args.stop, args.step, args.blocks,
                                 args.seed, args.mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _emit(runner(spec, config, link, workers=args.workers), args.out)
    return EXIT_OK


def _parse_steps(items: list[str]) -> tuple:
    steps = []
    for item in items:
        try:
            t, db = item.split(":")
            steps.append((float(t), float(db), 0.0))
        except ValueError:
            raise ConfigError(f"--loss-step expects T:DB, got {item!r}") from None
    return tuple(steps)


def cmd_stability(args) -> int:
    config, link = _load(args)
    if not args.duration > 0 or not args.interval > 0:
        raise ConfigError("duration and interval must be positive")
    if args.mode == "session":
        raise ConfigError("stability runs in analytic or mc mode")
    drift = DriftProfile(args.loss_amplitude, args.loss_period, args.visibility_amplitude,
                         args.visibility_period, 0.0, _parse_steps(args.loss_step))
    _emit(harness.run_stability(args.duration, config, link, drift, args.seed,
                                args.interval, args.mode), args.out)
    return EXIT_OK


def _bob_process(config, link, policy, port, queue):
    from .session.runner import serve_bob
    bob = serve_bob(config, link, policy, "127.0.0.1", port)
    queue.put((None if bob.key is None else np.packbits(bob.key).tobytes(),
               None if bob.key is None else int(bob.key.size),
               None if bob.abort is None else str(bob.abort)))


def _two_process_session(config, link, policy, seed):
    from .session.runner import SessionResult, SessionTranscript, serve_alice
    from .session.transport import listen
    ctx = mp.get_context("spawn")
    queue = ctx.Queue()
    srv = listen()
    port = srv.getsockname()[1]
    proc = ctx.Process(target=_bob_process, args=(config, link, policy, port, queue))
    proc.start()
    try:
        srv.settimeout(120.0)
        alice, alice_log, n_pulses = serve_alice(config, link, policy, seed, srv)
    finally:
        srv.close()
    packed, nbits, bob_abort = queue.get(timeout=120.0)
    proc.join(timeout=30.0)
    bob_key = None if packed is None else np.unpackbits(
        np.frombuffer(packed, dtype=np.uint8))[:nbits]
    abort = alice.abort
    reason = abort.reason.text if abort else None
    detail = abort.detail if abort else (bob_abort or "")
    if reason is None and bob_abort:
        reason = "channel"
    return SessionResult(
        alice_key=None if reason else alice.key, bob_key=None if reason else bob_key,
        report=alice.report, bob_report=None, transcript=SessionTranscript.from_log(alice_log),
        n_pulses=n_pulses, sample_size=alice.sample_size, lambda_ec=alice.lambda_ec,
        tag_bits=policy.tag_len(config), abort_reason=reason, abort_detail=detail)


SESSION_COLUMNS = ("schema_version", "seed", "loss_db", "block_size", "n_pulses",
                   "sample_bits", "syndrome_bits", "tag_bits", "keys_equal",
                   "abort_reason") + REPORT_COLUMNS


def cmd_session(args) -> int:
    from .session import BlockPolicy, audit_transcript, run_session, write_key
    from .session.runner import plan_session
    config, link = _load(args)
    try:
        policy = BlockPolicy(block_size=args.block_size, sample_fraction=args.sample_fraction)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.two_process:
        try:
            plan_session(config, link, policy)
        except BlockUnreachable:
            # Nothing to exchange: the in-process runner records the abort.
            result = run_session(config, link, policy, seed=args.seed)
        else:
            result = _two_process_session(config, link, policy, args.seed)
    else:
        result = run_session(config, link, policy, args.transport, args.seed)

    audit = audit_transcript(result.transcript)
    equal = (not result.aborted and result.alice_key is not None
             and np.array_equal(result.alice_key, result.bob_key))
    if args.key_dir is not None:
        args.key_dir.mkdir(parents=True, exist_ok=True)
        (args.key_dir / "transcript.bin").write_bytes(result.transcript.to_bytes())
        if not result.aborted:
            write_key(args.key_dir / "alice.key", result.alice_key)
            write_key(args.key_dir / "bob.key", result.bob_key)
    report_row = (result.report.csv_row() if result.report is not None
                  else [""] * len(REPORT_COLUMNS))
    row = [harness.CSV_SCHEMA_VERSION, args.seed, link.channel_loss, policy.block_size,
           result.n_pulses, audit.sample_bits, audit.syndrome_bits, audit.tag_bits,
           int(equal), result.abort_reason or ""] + report_row
    _emit(harness.Table(SESSION_COLUMNS, [row]), args.out)

    if result.aborted:
        print(f"session aborted: {result.abort_reason}"
              + (f" ({result.abort_detail})" if result.abort_detail else ""), file=sys.stderr)
        return EXIT_ABORT
    if not equal:
        print("session aborted: correctness failure (keys differ)", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


CALIBRATION_COLUMNS = ("schema_version", "intrinsic_error", "visibility_x", "detection_window",
                       "crosstalk_coeff", "sync_crosstalk_fraction", "skr_electrical",
                       "loss_cutoff_db", "power_cutoff_dbm", "skr_optical")


def cmd_calibrate(args) -> int:
    config, link = _load(args)
    cal = harness.calibrate(config, link, log=lambda s: print(s, file=sys.stderr))
    print(f"intrinsic_error (e_z = (1 - V)/2) = {cal.intrinsic_error!r}")
    print(f"crosstalk_coeff = {cal.crosstalk_coeff!r} counts/s/mW")
    print(f"sync_crosstalk_fraction = {cal.sync_crosstalk_fraction!r}")
    print(f"detection_window = {cal.detection_window!r} s")
    print(f"check: SKR(21 dB) = {cal.skr_electrical:.1f} bit/s, loss cutoff = "
          f"{cal.loss_cutoff_db:.3f} dB, power cutoff = {cal.power_cutoff_dbm:.3f} dBm, "
          f"optical SKR = {cal.skr_optical:.1f} bit/s")
    if args.out is not None:
        row = [harness.CSV_SCHEMA_VERSION, cal.intrinsic_error, 1.0 - 2.0 * cal.intrinsic_error,
               cal.detection_window, cal.crosstalk_coeff, cal.sync_crosstalk_fraction,
               cal.skr_electrical, cal.loss_cutoff_db, cal.power_cutoff_dbm, cal.skr_optical]
        harness.Table(CALIBRATION_COLUMNS, [row]).write(args.out)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if not 0 <= args.seed < 2**64:
        print("configuration error: --seed must be a u64", file=sys.stderr)
        return EXIT_CONFIG
    handlers = {
        "rate-vs-loss": lambda a: _sweep(a, "channel_loss_db", harness.run_rate_vs_loss),
        "rate-vs-power": lambda a: _sweep(a, "classical_power_dbm",
                                          harness.run_rate_vs_classical_power),
        "stability": cmd_stability,
        "session": cmd_session,
        "calibrate": cmd_calibrate,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
