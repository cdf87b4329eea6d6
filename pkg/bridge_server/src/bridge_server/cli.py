"""CLI for the reference bridge server."""

from __future__ import annotations

import argparse
import sys

from .server import ServerConfig, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bridge-server",
        description="Reference denoiser-bridge HTTP server (delta-target oracle).")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8800)
    parser.add_argument("--target", default=None,
                        help=".npy tensor the hosted oracle denoises toward "
                             "(default: zeros of each request's shape)")
    parser.add_argument("--num-steps", type=int, default=1000)
    parser.add_argument("--beta-start", type=float, default=1e-4)
    parser.add_argument("--beta-end", type=float, default=2e-2)
    args = parser.parse_args(argv)
    try:
        config = ServerConfig(host=args.host, port=args.port,
                              num_steps=args.num_steps, beta_start=args.beta_start,
                              beta_end=args.beta_end, target_path=args.target)
        serve(config)
    except OSError as exc:
        print(f"bridge-server: cannot bind {args.host}:{args.port}: {exc}",
              file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"bridge-server: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
