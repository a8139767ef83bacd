"""Command line: load models and serve the wire protocol."""

from __future__ import annotations

import argparse
import sys

from .config import load_config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tikzsmith-adapter")
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="start the model server")
    serve.add_argument("--config", default=None, help="YAML config file")
    serve.add_argument("--model", default=None)
    serve.add_argument("--vision-encoder", dest="vision_encoder", default=None)
    serve.add_argument("--device", default=None)
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    args = parser.parse_args(argv)

    if args.command == "serve":
        try:
            config = load_config(
                args.config,
                model=args.model,
                vision_encoder=args.vision_encoder,
                device=args.device,
                host=args.host,
                port=args.port,
            )
        except (OSError, ValueError) as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            return 2

        import uvicorn

        from .server import create_app

        try:
            app = create_app(config)
        except Exception as exc:  # model load failures surface with context
            print(f"startup error loading models: {exc}", file=sys.stderr)
            return 1
        uvicorn.run(app, host=config.host, port=config.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
