"""Command-line entry point.

The CLI is a thin client over the HTTP service: every subcommand builds
a request, sends it to the service app (in-process by default, or to a
remote instance via --server), and renders the response. Exit codes
classify failures: 0 ok, 2 config error, 3 missing capability, 4
anything else.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import Optional

import httpx

from .config import (
    RunConfig,
    config_to_sections,
    load_config,
    render_toml,
)
from .errors import ConfigError, UarchFuzzError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CAPABILITY = 3
EXIT_RUNTIME = 4

_STATUS_EXIT = {400: EXIT_CONFIG, 422: EXIT_CONFIG, 503: EXIT_CAPABILITY}


class ServiceClient:
    """Uniform GET/POST against a remote server or the in-process app."""

    def __init__(self, server: Optional[str] = None) -> None:
        self.server = server.rstrip("/") if server else None

    def request(self, method: str, path: str, payload: Optional[dict] = None):
        if self.server is not None:
            with httpx.Client(base_url=self.server, timeout=None) as client:
                resp = client.request(method, path, json=payload)
                return resp.status_code, resp.json()

        from .service.app import create_app

        async def go():
            transport = httpx.ASGITransport(app=create_app())
            async with httpx.AsyncClient(
                transport=transport, base_url="http://uarchfuzz", timeout=None
            ) as client:
                resp = await client.request(method, path, json=payload)
                return resp.status_code, resp.json()

        return asyncio.run(go())

    def get(self, path: str):
        return self.request("GET", path)

    def post(self, path: str, payload: dict):
        return self.request("POST", path, payload)


def _exit_for_status(status: int) -> int:
    if 200 <= status < 300:
        return EXIT_OK
    return _STATUS_EXIT.get(status, EXIT_RUNTIME)


def _fail(body: dict, status: int) -> int:
    detail = body.get("detail", body)
    print(f"error ({body.get('error', status)}): {detail}", file=sys.stderr)
    return _exit_for_status(status)


# --- config assembly -------------------------------------------------------------


def build_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "backend", None):
        import dataclasses

        cfg = dataclasses.replace(cfg, backend=args.backend)
    if getattr(args, "cores", None):
        import dataclasses

        try:
            cores = tuple(int(c) for c in args.cores.split(","))
        except ValueError as exc:
            raise ConfigError(f"--cores must be a comma-separated int list: {exc}")
        cfg = dataclasses.replace(cfg, cores=cores)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_master_seed(args.seed)
    return cfg


def _read_sequence(path: str) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read sequence file {path}: {exc}")
    lines = []
    for raw in text.splitlines():
        line = raw.split(";", 1)[0].strip()
        if line:
            lines.append(line)
    if not lines:
        raise ConfigError(f"sequence file {path} has no instructions")
    return lines


def _parse_int_list(spec: str, what: str) -> list[int]:
    """Accept '1,3,10' or 'lo:hi:step' range syntax."""
    try:
        if ":" in spec:
            lo, hi, step = (int(x) for x in spec.split(":"))
            if step < 1:
                raise ValueError("step must be >= 1")
            return list(range(lo, hi + 1, step))
        return [int(x) for x in spec.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad {what} spec {spec!r}: {exc}")


# --- subcommands ----------------------------------------------------------------


def cmd_train(args: argparse.Namespace, client: ServiceClient) -> int:
    cfg = build_run_config(args)
    if args.print_config:
        print(render_toml(cfg), end="")
        return EXIT_OK
    payload = {
        "config": config_to_sections(cfg),
        "total_steps": args.steps,
        "out_dir": args.out,
    }
    status, body = client.post("/train", payload)
    if status != 200:
        return _fail(body, status)
    print(
        f"trained {body['total_steps']} steps, {body['episodes']} episodes, "
        f"{body['updates']} updates in {body['elapsed_seconds']:.1f}s"
    )
    print(
        f"mean reward (last 100 episodes): {body['mean_reward_last_100']:.2f}; "
        f"leaking episodes: {body['leak_episodes']}"
    )
    for leak in body["discovered"]:
        print(
            f"leak: episode {leak['episode']} bytes {leak['leak_bytes']} "
            f"reward {leak['reward']:.1f}"
        )
        for line in leak["lines"]:
            print(f"    {line}")
    for key in ("checkpoint_path", "log_path"):
        if body.get(key):
            print(f"{key.replace('_', ' ')}: {body[key]}")
    for p in body.get("plot_paths", []):
        print(f"plot: {p}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace, client: ServiceClient) -> int:
    cfg = build_run_config(args)
    payload = {"config": config_to_sections(cfg), "sequence": _read_sequence(args.sequence)}
    status, body = client.post("/replay", payload)
    if status != 200:
        return _fail(body, status)
    print("sequence:")
    for line in body["sequence"]:
        print(f"    {line}")
    print("reward breakdown:")
    for key, value in body["breakdown"].items():
        print(f"    {key}: {value}")
    if body.get("exception"):
        print(f"exception: {body['exception']}")
    trace = body.get("trace")
    if trace:
        print("decision trace:")
        for key in ("je_match", "jne_match", "lfence_je_match",
                    "lfence_jne_match", "classified_leak"):
            print(f"    {key}: {trace[key]}")
    leak = body.get("leak")
    if leak:
        print(
            f"leak: {leak['decoded_bytes']} bytes decoded, matched fraction "
            f"{leak['matched_fraction']:.3f}, granularity {leak['granularity']}-bit"
        )
    return EXIT_OK


def cmd_leakrate(args: argparse.Namespace, client: ServiceClient) -> int:
    cfg = build_run_config(args)
    payload = {
        "config": config_to_sections(cfg),
        "sequence": _read_sequence(args.sequence),
        "n_values": _parse_int_list(args.iterations, "--iterations"),
        "granularities": _parse_int_list(args.granularities, "--granularities"),
        "label": Path(args.sequence).stem,
        "out_dir": args.out,
    }
    status, body = client.post("/leakrate", payload)
    if status != 200:
        return _fail(body, status)
    for series in body["series"]:
        peak = max(series["rates"]) if series["rates"] else 0.0
        print(
            f"{series['label']}: granularity {series['granularity']}-bit, "
            f"N {series['n_values'][0]}..{series['n_values'][-1]}, "
            f"peak {peak:.0f} bits/s"
        )
    for p in body.get("series_paths", []):
        print(f"series: {p}")
    if body.get("plot_path"):
        print(f"plot: {body['plot_path']}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, client: ServiceClient) -> int:
    payload = {"log_path": args.log, "out_dir": args.out, "window": args.window}
    status, body = client.post("/analyze", payload)
    if status != 200:
        return _fail(body, status)
    print(f"analyzed {body['episodes']} episodes")
    for p in body["plot_paths"]:
        print(f"plot: {p}")
    return EXIT_OK


def cmd_catalog(args: argparse.Namespace, client: ServiceClient) -> int:
    payload = {"catalog": args.catalog, "denylist": args.denylist}
    status, body = client.post("/catalog", payload)
    if status != 200:
        return _fail(body, status)
    width = max(len(s["name"]) for s in body["sets"])
    for row in body["sets"]:
        print(f"{row['name']:<{width}} {row['count']}")
    print(f"{'TOTAL':<{width}} {body['total']}")
    print(
        f"action space: {body['n_sets']} sets x {body['max_set_size']} instructions "
        f"x 7 operand slots of {body['operand_head_size']}"
    )
    return EXIT_OK


def cmd_serve(args: argparse.Namespace, client: ServiceClient) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="TOML config file")
    sp.add_argument("--backend", choices=["sim", "hw"], help="measurement backend")
    sp.add_argument("--seed", type=int, help="master seed spread over all components")
    sp.add_argument("--cores", help="comma-separated core pin list, e.g. 0,1,2")
    sp.add_argument("--out", help="output directory for artifacts")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="uarchfuzz",
        description="RL-driven instruction-sequence fuzzer for transient-execution leakage",
    )
    p.add_argument("--server", help="base URL of a running service (default: in-process)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the agent and log discoveries")
    _add_common(t)
    t.add_argument("--steps", type=int, help="override total environment steps")
    t.add_argument("--print-config", action="store_true",
                   help="print the effective config as TOML and exit")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("replay", help="measure one saved sequence and print the verdict")
    _add_common(r)
    r.add_argument("sequence", help="assembly sequence file (one instruction per line)")
    r.set_defaults(func=cmd_replay)

    l = sub.add_parser("leakrate", help="leak-rate sweep over iterations and granularities")
    _add_common(l)
    l.add_argument("sequence", help="assembly sequence file")
    l.add_argument("--iterations", default="1,2,3,5,10,20,50,100,200,300",
                   help="N values: comma list or lo:hi:step")
    l.add_argument("--granularities", default="1,4,8", help="bits per probe pass")
    l.set_defaults(func=cmd_leakrate)

    a = sub.add_parser("analyze", help="render curves and scatter from an episode log")
    a.add_argument("log", help="episodes.jsonl path")
    a.add_argument("--out", required=True, help="directory for the SVG plots")
    a.add_argument("--window", type=int, default=51, help="running-mean window")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("catalog", help="print per-set instruction counts")
    c.add_argument("--catalog", default="synthetic",
                   help="synthetic|corpus|skylake|raptorlake or a JSON path")
    c.add_argument("--denylist", default="builtin", help="builtin|none or a file path")
    c.set_defaults(func=cmd_catalog)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8337)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    client = ServiceClient(args.server)
    try:
        return args.func(args, client)
    except UarchFuzzError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except httpx.HTTPError as exc:
        print(f"error (transport): {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
