"""Run the full experiment; same flags as ``attackability run``."""

import sys

from attackability.cli import main

if __name__ == "__main__":
    sys.exit(main(["run", *sys.argv[1:]]))
