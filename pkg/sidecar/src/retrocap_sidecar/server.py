"""Process entry point: configuration parsing and the uvicorn runner."""

from __future__ import annotations

import argparse
import logging
import sys

import uvicorn

from .backends import BackendStartupError, build_backend
from .config import DEFAULT_LISTEN, LISTEN_ENV, ConfigError, ServiceConfig
from .app import create_app


def build_config(argv: list[str] | None = None) -> ServiceConfig:
    parser = argparse.ArgumentParser(
        prog="retrocap-sidecar",
        description="Serve embedding, scoring, and constrained-LM endpoints.",
    )
    parser.add_argument(
        "--listen",
        default=None,
        help=f"host:port (default {LISTEN_ENV} or {DEFAULT_LISTEN})",
    )
    parser.add_argument("--backend", default="lite", help="model backend")
    parser.add_argument("--seed", type=int, default=0, help="lite backend seed")
    parser.add_argument("--device", default="cpu", help="inference device")
    parser.add_argument("--max-batch", type=int, default=256, help="embedding batch cap")
    parser.add_argument("--cross-modal-model", default=ServiceConfig.cross_modal_model)
    parser.add_argument("--sentence-model", default=ServiceConfig.sentence_model)
    parser.add_argument("--lm-model", default=ServiceConfig.lm_model)
    parser.add_argument("--scorer-model", default=ServiceConfig.scorer_model)
    args = parser.parse_args(argv)
    return ServiceConfig.from_environment(
        listen=args.listen or None,
        backend=args.backend,
        seed=args.seed,
        device=args.device,
        max_batch=args.max_batch,
        cross_modal_model=args.cross_modal_model,
        sentence_model=args.sentence_model,
        lm_model=args.lm_model,
        scorer_model=args.scorer_model,
    )


def serve(config: ServiceConfig) -> None:
    """Run the service until interrupted."""
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = build_config(argv)
        # fail before binding the port if the backend cannot load
        build_backend(config)
    except (ConfigError, BackendStartupError) as exc:
        sys.stderr.write(f"startup failure: {exc}\n")
        return 1
    serve(config)
    return 0


if __name__ == "__main__":
    sys.exit(main())
