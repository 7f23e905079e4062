#!/usr/bin/env python3
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent / "src"))
from php_av.runner.experiment_cli import main

if __name__ == "__main__":
    sys.exit(main())
