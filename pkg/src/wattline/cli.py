"""Command-line entry point.

Exit status: 0 on success, 1 on an operational error, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import warnings
from pathlib import Path

from wattline import __version__
from wattline.csvio import records_to_csv
from wattline.records import encode_record
from wattline.timeutil import parse_ts

log = logging.getLogger("wattline")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
CONFIG_ENV = "WATTLINE_CONFIG"


class UsageError(Exception):
    pass


def _config_path(args) -> Path:
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if not path:
        raise UsageError(f"a config file is required: pass --config PATH or set {CONFIG_ENV}")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    return p


def _agent_config(args):
    from wattline.agent import AgentConfig

    return AgentConfig.load(_config_path(args))


def _client(cfg):
    from wattline.uploader import ApiClient, HttpTransport

    return ApiClient(HttpTransport(cfg.server_url, ca_bundle=cfg.ca_bundle))


def _write_output(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)


def _ts(value: str | None):
    if value is None:
        return None
    try:
        return parse_ts(value)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_agent_run(args) -> int:
    from wattline.agent import Agent

    agent = Agent(_agent_config(args))
    signal.signal(signal.SIGTERM, lambda *_: agent.stop())
    log.info("agent started; store at %s", agent.config.store_dir)
    try:
        agent.run()
    except KeyboardInterrupt:
        agent.stop()
    log.info("agent stopped; %s", agent.store.counts())
    return EXIT_OK


def _open_store(args):
    from wattline.store import LocalStore

    return LocalStore(_agent_config(args).store_dir)


def cmd_agent_status(args) -> int:
    with _open_store(args) as store:
        c = store.counts()
    print(f"pending={c['pending']} in_flight={c['in_flight']} acked={c['acked']}")
    return EXIT_OK


def cmd_agent_search(args) -> int:
    start, end = _ts(args.start), _ts(args.end)
    needle = args.name.casefold() if args.name else None
    with _open_store(args) as store:
        rows = [
            r for r in store.records()
            if (needle is None or needle in r.process_name.casefold())
            and (args.status is None or r.status.value == args.status)
            and (start is None or r.interval_start >= start)
            and (end is None or r.interval_start <= end)
        ]
    rows.sort(key=lambda r: (r.interval_start, str(r.record_id)))
    if args.format == "csv":
        _write_output(records_to_csv(rows), args.out)
    else:
        _write_output("".join(encode_record(r) + "\n" for r in rows), args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    from wattline.backend import BackendApp, ServerSettings

    settings = ServerSettings.load(_config_path(args))
    app = BackendApp(settings)
    server = app.serve()
    log.info("serving on %s", server.url)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
        app.close()
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from wattline.power import CalibrationWarning, fit, parse_mask, read_trace

    try:
        mask = parse_mask(args.mask)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    samples = read_trace(args.trace)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", CalibrationWarning)
        model = fit(samples, mask)
    for w in caught:
        log.warning("calibration warning: %s", w.message)
    model.save(args.out)
    log.info("fitted %d samples; model written to %s", len(samples), args.out)
    return EXIT_OK


def cmd_simulate_records(args) -> int:
    from wattline.power import PowerModel
    from wattline.sampler import Sampler
    from wattline.sim import DEFAULT_EPOCH, load_scenario, make_provider
    from wattline.timeutil import ManualClock

    scenario = load_scenario(args.scenario)
    clock = ManualClock(DEFAULT_EPOCH)
    provider = make_provider(scenario, clock=clock, tick_s=args.interval_ms / 1000.0)
    model = PowerModel.load(args.model) if args.model else None
    sink: list = []
    Sampler(provider, sink, interval_ms=args.interval_ms, model=model).run(clock, max_ticks=args.ticks)
    if args.format == "csv":
        _write_output(records_to_csv(sink), args.out)
    else:
        _write_output("".join(encode_record(r) + "\n" for r in sink), args.out)
    log.info("%d records from %d ticks", len(sink), args.ticks)
    return EXIT_OK


def cmd_simulate_trace(args) -> int:
    from wattline.power import PowerModel
    from wattline.sim import load_scenario, synth_calibration

    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        from dataclasses import replace

        scenario = replace(scenario, seed=args.seed)
    synth_calibration(scenario, PowerModel.load(args.model), args.sigma, args.n, path=args.out)
    log.info("wrote %d calibration samples to %s", args.n, args.out)
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = _agent_config(args)
    client = _client(cfg)
    token = client.login(cfg.email, cfg.password)
    filters = {"from": args.start, "to": args.end, "user_id": args.user_id}
    _write_output(client.export_csv(token, **{k: v for k, v in filters.items() if v}), args.out)
    return EXIT_OK


def cmd_register(args) -> int:
    cfg = _agent_config(args)
    _client(cfg).register(cfg.email, cfg.password)
    print(f"registered {cfg.email}")
    return EXIT_OK


def cmd_login(args) -> int:
    cfg = _agent_config(args)
    token = _client(cfg).login(cfg.email, cfg.password)
    print(json.dumps({"token": token.token, "expires_at": token.expires_at.isoformat()}))
    return EXIT_OK


def cmd_check_update(args) -> int:
    from wattline.uploader import parse_semver

    cfg = _agent_config(args)
    try:
        parse_semver(args.current_version)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    info = _client(cfg).check_update(args.current_version)
    print(json.dumps({"latest_version": info.latest_version, "download_url": info.download_url,
                      "update_available": info.update_available, "error": info.error}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help=f"JSON config file (falls back to ${CONFIG_ENV})")
    common.add_argument("--log-level", default=argparse.SUPPRESS,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])

    parser = argparse.ArgumentParser(prog="wattline", parents=[common],
                                     description="Process metrics and energy collection suite.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    agent = sub.add_parser("agent", help="run or inspect the collection agent", parents=[common])
    agent_sub = agent.add_subparsers(dest="agent_command", metavar="ACTION")
    agent_sub.required = True
    agent_sub.add_parser("run", help="sample and upload until interrupted",
                         parents=[common]).set_defaults(func=cmd_agent_run)
    agent_sub.add_parser("status", help="print local queue counts",
                         parents=[common]).set_defaults(func=cmd_agent_status)
    search = agent_sub.add_parser("search", help="filter records in the local store", parents=[common])
    search.add_argument("--name", help="case-insensitive substring of the process name")
    search.add_argument("--status", choices=["focus", "idle"])
    search.add_argument("--from", dest="start", help="ISO-8601 lower bound on interval_start")
    search.add_argument("--to", dest="end", help="ISO-8601 upper bound on interval_start")
    search.add_argument("--format", choices=["jsonl", "csv"], default="jsonl")
    search.add_argument("--out", help="output file (default: stdout)")
    search.set_defaults(func=cmd_agent_search)

    sub.add_parser("serve", help="run the back-end HTTP service",
                   parents=[common]).set_defaults(func=cmd_serve)

    cal = sub.add_parser("calibrate", help="fit a power model from a calibration trace", parents=[common])
    cal.add_argument("--trace", required=True, help="calibration trace CSV")
    cal.add_argument("--mask", required=True, help="comma-separated features: cpu,mem,disk,net,io")
    cal.add_argument("--out", required=True, help="model file to write")
    cal.set_defaults(func=cmd_calibrate)

    sim = sub.add_parser("simulate", help="run scripted scenarios offline", parents=[common])
    sim_sub = sim.add_subparsers(dest="sim_command", metavar="ACTION")
    sim_sub.required = True
    rec = sim_sub.add_parser("records", help="sample a scenario and print its records", parents=[common])
    rec.add_argument("--scenario", required=True, help="scenario file or bundled fixture name")
    rec.add_argument("--ticks", type=int, default=60)
    rec.add_argument("--interval-ms", type=int, default=1000)
    rec.add_argument("--model", help="power model file for energy attribution")
    rec.add_argument("--format", choices=["jsonl", "csv"], default="jsonl")
    rec.add_argument("--out")
    rec.set_defaults(func=cmd_simulate_records)
    tr = sim_sub.add_parser("trace", help="write a synthetic calibration trace", parents=[common])
    tr.add_argument("--scenario", required=True)
    tr.add_argument("--model", required=True, help="generating power model file")
    tr.add_argument("--sigma", type=float, default=0.0, help="Gaussian noise, watts")
    tr.add_argument("--n", type=int, default=100)
    tr.add_argument("--seed", type=int, help="override the scenario seed")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_simulate_trace)

    exp = sub.add_parser("export", help="download records from the server as CSV", parents=[common])
    exp.add_argument("--from", dest="start")
    exp.add_argument("--to", dest="end")
    exp.add_argument("--user-id", help="another user's records (admin only)")
    exp.add_argument("--out")
    exp.set_defaults(func=cmd_export)

    sub.add_parser("register", help="create the configured account",
                   parents=[common]).set_defaults(func=cmd_register)
    sub.add_parser("login", help="obtain a token for the configured account",
                   parents=[common]).set_defaults(func=cmd_login)
    upd = sub.add_parser("check-update", help="ask the server for a newer release", parents=[common])
    upd.add_argument("--current-version", default=__version__)
    upd.set_defaults(func=cmd_check_update)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(args, "log_level", "WARNING"), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wattline: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # operational failure: one-line cause
        log.debug("failure detail", exc_info=True)
        print(f"wattline: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
