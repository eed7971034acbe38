"""Command-line entry point: ``vmecrate {run,replay,validate,luts,manifest,bench,serve}``."""

import argparse
import json
import logging
import os
import sys
import time

from . import config as config_mod
from . import scenario
from .boards.mps import history_csv, read_dump, reconstruct
from .boards.pll import build_luts
from .errors import CrateError, ValidationError
from .gateway import PORT_ENV, Gateway, GatewayService, load_bindings, manifest_bindings

log = logging.getLogger("vmecrate")


def _load_config(path):
    return config_mod.load(path or config_mod.bundled("crate.yaml"))


def _bindings(cfg, crate, path=None):
    path = path or cfg.bindings_path
    if path:
        return load_bindings(path)
    return manifest_bindings(crate)


def cmd_validate(args):
    cfg = _load_config(args.config)
    if args.script:
        scenario.load_script(args.script)
    print(f"ok: {len(cfg.boards)} boards" + (f", ring of {len(cfg.ring.boards)}" if cfg.ring else ""))
    return 0


def cmd_run(args):
    cfg = _load_config(args.config)
    script = scenario.load_script(args.script)
    crate = config_mod.build_crate(cfg, trace=True)
    service = None
    if args.gateway_port is not None:
        gateway = Gateway(crate, _bindings(cfg, crate, args.bindings))
    result = scenario.run(cfg, script, seed=args.seed, trace_path=args.trace,
                          state_path=args.state, dump_dir=args.dump_dir, crate=crate)
    if result.failures:
        print(f"FAIL: {result.first_failure}", file=sys.stderr)
    else:
        print(f"ok: {result.assertions} assertions passed, {result.cycles} scripted cycles")
    if args.gateway_port is not None:
        service = GatewayService(crate, gateway, port=args.gateway_port).start()
        print("PV gateway on %s:%d (Ctrl-C to stop)" % service.address)
        try:
            while True:
                time.sleep(1)
        except KeyboardInterrupt:
            pass
        finally:
            service.stop()
    return result.exit_status


def cmd_serve(args):
    cfg = _load_config(args.config)
    crate = config_mod.build_crate(cfg, trace=False)
    gateway = Gateway(crate, _bindings(cfg, crate, args.bindings))
    port = args.port if args.port is not None else int(os.environ.get(PORT_ENV, "5064"))
    service = GatewayService(crate, gateway, port=port).start()
    print("PV gateway on %s:%d (Ctrl-C to stop)" % service.address)
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
    return 0


def cmd_replay(args):
    buffer, pointer = read_dump(args.dump)
    records = reconstruct(buffer, pointer)
    if args.output and args.output != "-":
        history_csv(records, args.output)
    else:
        history_csv(records, sys.stdout)
    return 0


def cmd_luts(args):
    image = build_luts().to_bytes()
    with open(args.output, "wb") as fh:
        fh.write(image)
    print(f"wrote {len(image)} bytes to {args.output}")
    return 0


def cmd_manifest(args):
    cfg = _load_config(args.config)
    crate = config_mod.build_crate(cfg, trace=False)
    manifest = {}
    for name, board in crate.boards.items():
        windows = [{"region": r.region, "space": r.space.name, "base": f"0x{r.base:06X}",
                    "size": r.window_bytes} for r in crate.bus.registrations_for(board)]
        manifest[name] = {"kind": board.kind, "slot": board.slot, "windows": windows,
                          "registers": board.register_map.manifest()}
    text = json.dumps(manifest, indent=2)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_bench(args):
    cfg = _load_config(args.config)
    script = scenario.load_script(args.script or config_mod.bundled("bench.yaml"))
    crate = config_mod.build_crate(cfg, trace=not args.no_trace)
    start = time.perf_counter()
    result = scenario.Runner(crate, script, seed=args.seed).run()
    elapsed = time.perf_counter() - start
    rate = result.cycles / elapsed if elapsed > 0 else float("inf")
    print(f"{result.cycles} bus cycles in {elapsed:.3f} s: {rate:,.0f} cycles/s")
    return 0 if result.exit_status == 0 and rate >= args.floor else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="vmecrate", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a scenario script")
    p.add_argument("script")
    p.add_argument("-c", "--config", help="crate config (default: bundled crate)")
    p.add_argument("--trace", default="trace.jsonl")
    p.add_argument("--state", help="write a JSON final-state dump here")
    p.add_argument("--dump-dir", help="directory for MPS buffer dumps and DSP memory images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gateway-port", type=int, help="keep serving PVs on this port after the run")
    p.add_argument("--bindings", help="PV bindings file (overrides the config)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="decode an MPS buffer dump to CSV")
    p.add_argument("dump")
    p.add_argument("-o", "--output", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("validate", help="check a config (and optionally a script)")
    p.add_argument("-c", "--config")
    p.add_argument("--script")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("luts", help="write the PLL flash image")
    p.add_argument("-o", "--output", default="pll_flash.bin")
    p.set_defaults(func=cmd_luts)

    p = sub.add_parser("manifest", help="print register maps as JSON")
    p.add_argument("-c", "--config")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("bench", help="run the bundled throughput scenario")
    p.add_argument("-c", "--config")
    p.add_argument("--script")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--floor", type=float, default=1e5, help="minimum cycles/s for exit 0")
    p.add_argument("--no-trace", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the PV gateway on an idle crate")
    p.add_argument("-c", "--config")
    p.add_argument("--bindings")
    p.add_argument("--port", type=int, help=f"TCP port (default ${PORT_ENV} or 5064)")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return 2
    except (CrateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
