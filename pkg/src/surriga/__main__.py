"""Module entry point: ``python -m surriga <command> ...``."""

import sys

from .cli import main

sys.exit(main())
