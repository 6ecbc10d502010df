"""Allow `python -m anchordrive` to reach the command-line interface."""

from .cli import entrypoint

if __name__ == "__main__":
    raise SystemExit(entrypoint())
