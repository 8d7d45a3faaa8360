"""Module entry point: ``python -m parasource`` behaves like the CLI."""

import sys

from parasource.cli import main

if __name__ == "__main__":
    sys.exit(main())
