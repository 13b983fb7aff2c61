"""HTTP service exposing the fuzzing pipeline.

All domain errors inherit from UarchFuzzError and carry their own HTTP
status (config 400, missing capability 503, everything else 500), so a
single exception handler keeps the service and CLI failure taxonomy in
lockstep.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__, analytics
from ..backends import get_backend
from ..catalog import action_space_shape, parse_sequence
from ..config import RunConfig, config_to_sections, from_dict, render_toml
from ..env import evaluate_sequence
from ..errors import ConfigError, UarchFuzzError
from ..fixtures import load_run_catalog
from ..runner import probe_capabilities
from ..train import Trainer
from . import schemas


def _config_from_payload(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config must be a table of sections")
    return from_dict(payload)


def create_app() -> FastAPI:
    app = FastAPI(title="uarchfuzz", version=__version__)

    @app.exception_handler(UarchFuzzError)
    async def _domain_error(request, exc: UarchFuzzError):
        return JSONResponse(
            status_code=exc.http_status,
            content=schemas.ErrorResponse(
                error=type(exc).__name__, detail=str(exc)
            ).model_dump(),
        )

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.get("/capabilities", response_model=schemas.CapabilitiesResponse)
    def capabilities() -> schemas.CapabilitiesResponse:
        report = probe_capabilities()
        return schemas.CapabilitiesResponse(
            ok=report.ok, problems=list(report.problems), details=dict(report.details)
        )

    @app.get("/config/defaults", response_model=schemas.ConfigDefaultsResponse)
    def config_defaults() -> schemas.ConfigDefaultsResponse:
        cfg = RunConfig()
        # Sectioned shape so the response can be edited and POSTed back.
        return schemas.ConfigDefaultsResponse(
            config=config_to_sections(cfg), toml=render_toml(cfg)
        )

    @app.post("/catalog", response_model=schemas.CatalogResponse)
    def catalog_listing(req: schemas.CatalogRequest) -> schemas.CatalogResponse:
        catalog = load_run_catalog(req.catalog, req.denylist)
        shape = action_space_shape(catalog)
        rows = [
            schemas.CatalogSetRow(name=s.name, count=len(s.instructions))
            for s in catalog.sets
        ]
        return schemas.CatalogResponse(
            sets=rows,
            total=sum(r.count for r in rows),
            n_sets=shape.n_sets,
            max_set_size=shape.max_set_size,
            operand_head_size=shape.operand_head_size,
        )

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest) -> schemas.TrainResponse:
        cfg = _config_from_payload(req.config)
        if req.total_steps is not None and req.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        discovered: list[schemas.DiscoveredLeak] = []

        def on_leak(summary) -> None:
            if len(discovered) < 20:
                discovered.append(
                    schemas.DiscoveredLeak(
                        episode=summary.index,
                        reward=summary.reward,
                        leak_bytes=summary.leak_bytes,
                        lines=list(summary.lines),
                    )
                )

        trainer = Trainer(cfg, run_dir=req.out_dir, on_leak=on_leak)
        result = trainer.train(total_steps=req.total_steps)

        plot_paths: list[str] = []
        if req.out_dir is not None and result.log_path is not None:
            records = analytics.load_log(result.log_path)
            if records:
                window = min(101, max(1, len(records) // 10 * 2 + 1))
                out = Path(req.out_dir)
                for kind, series in (
                    ("reward", analytics.reward_curve(records, window)),
                    ("length", analytics.length_curve(records, window)),
                    ("scatter", analytics.scatter_points(records)),
                ):
                    plot_paths.append(
                        str(analytics.emit_plot(series, out / f"{kind}.svg", kind))
                    )

        rewards = [e.reward for e in result.episodes[-100:]]
        return schemas.TrainResponse(
            episodes=len(result.episodes),
            total_steps=result.total_steps,
            updates=result.updates,
            elapsed_seconds=result.elapsed,
            mean_reward_last_100=float(np.mean(rewards)) if rewards else 0.0,
            leak_episodes=sum(1 for e in result.episodes if e.leak_bytes > 0),
            discovered=discovered,
            checkpoint_path=str(result.checkpoint_path) if result.checkpoint_path else None,
            log_path=str(result.log_path) if result.log_path else None,
            plot_paths=plot_paths,
        )

    @app.post("/replay", response_model=schemas.ReplayResponse)
    def replay(req: schemas.ReplayRequest) -> schemas.ReplayResponse:
        cfg = _config_from_payload(req.config)
        if not req.sequence:
            raise ConfigError("replay needs a non-empty sequence")
        catalog = load_run_catalog(cfg.catalog, cfg.denylist)
        backend = get_backend(cfg)
        seq = parse_sequence(catalog, req.sequence)
        ev = evaluate_sequence(seq, backend, cfg.env)

        leak: Optional[schemas.LeakReport] = None
        if ev.protocol is not None and ev.exception is None:
            outcome = ev.protocol.outcome
            leak = schemas.LeakReport(
                decoded_bytes=outcome.decoded_bytes,
                matched_fraction=outcome.matched_fraction,
                elapsed_seconds=outcome.elapsed,
                probe_elapsed_seconds=outcome.probe_elapsed,
                granularity=outcome.granularity,
            )
        return schemas.ReplayResponse(
            reward=ev.breakdown.capped,
            breakdown=ev.breakdown.to_dict(),
            trace=dataclasses.asdict(ev.protocol.trace) if ev.protocol else None,
            counters=dict(ev.sample.counts) if ev.sample is not None else None,
            exception=ev.exception.value if ev.exception else None,
            leak=leak,
            sequence=req.sequence,
        )

    @app.post("/leakrate", response_model=schemas.LeakRateResponse)
    def leakrate(req: schemas.LeakRateRequest) -> schemas.LeakRateResponse:
        cfg = _config_from_payload(req.config)
        if not req.sequence:
            raise ConfigError("leak-rate sweep needs a non-empty sequence")
        catalog = load_run_catalog(cfg.catalog, cfg.denylist)
        backend = get_backend(cfg)
        seq = parse_sequence(catalog, req.sequence)
        series = analytics.leak_rate_sweep(
            seq, req.n_values, req.granularities, backend, cfg.env, label=req.label
        )
        series_paths: list[str] = []
        plot_path: Optional[str] = None
        if req.out_dir is not None:
            out = Path(req.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            import json

            for s in series:
                p = out / f"leakrate-g{s.granularity}.json"
                p.write_text(
                    json.dumps(analytics.series_to_json(s), indent=1, sort_keys=True)
                    + "\n",
                    encoding="utf-8",
                )
                series_paths.append(str(p))
            plot_path = str(
                analytics.emit_plot(series, out / "leakrate.svg", "leakrate")
            )
        return schemas.LeakRateResponse(
            series=[
                schemas.LeakRateSeriesModel(**analytics.series_to_json(s))
                for s in series
            ],
            series_paths=series_paths,
            plot_path=plot_path,
        )

    @app.post("/analyze", response_model=schemas.AnalyzeResponse)
    def analyze(req: schemas.AnalyzeRequest) -> schemas.AnalyzeResponse:
        log_path = Path(req.log_path)
        if not log_path.exists():
            raise ConfigError(f"log file {log_path} does not exist")
        records = analytics.load_log(log_path)
        if not records:
            raise ConfigError(f"log file {log_path} contains no episodes")
        if req.window < 1:
            raise ConfigError("window must be >= 1")
        out = Path(req.out_dir)
        plot_paths = [
            str(analytics.emit_plot(analytics.reward_curve(records, req.window),
                                    out / "reward.svg", "reward")),
            str(analytics.emit_plot(analytics.length_curve(records, req.window),
                                    out / "length.svg", "length")),
            str(analytics.emit_plot(analytics.scatter_points(records),
                                    out / "scatter.svg", "scatter")),
        ]
        return schemas.AnalyzeResponse(episodes=len(records), plot_paths=plot_paths)

    return app


app = create_app()
