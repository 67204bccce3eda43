"""Entry point: ``embed-service [--config slots.yaml] [--host H] [--port P]``."""

from __future__ import annotations

import argparse
import logging

from .app import serve
from .config import ServiceConfig


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Embedding sidecar service")
    parser.add_argument("--config", help="YAML file listing model slots")
    parser.add_argument("--host", default=None)
    parser.add_argument("--port", type=int, default=None)
    parser.add_argument(
        "--hashed",
        action="store_true",
        help="serve deterministic hashed slots (no model weights needed)",
    )
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    if args.hashed:
        config = ServiceConfig.hashed()
    elif args.config:
        config = ServiceConfig.load(args.config)
    else:
        config = ServiceConfig()
    serve(config, host=args.host or config.host, port=args.port or config.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
