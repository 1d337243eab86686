#!/usr/bin/env python3
"""
atnbreak CLI entry point

Allows running the toolkit as a module:
    python -m atnbreak attack --model out/model.ckpt --dataset val --count 10
"""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
