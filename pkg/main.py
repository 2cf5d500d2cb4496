#!/usr/bin/env python3
"""Main CLI entry point for the FedBench federated learning benchmark."""

import sys

from src.fedbench.cli import main

if __name__ == "__main__":
    sys.exit(main())
