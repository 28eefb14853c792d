#!/usr/bin/env python3
"""
Voice Safety Guard

A command-line utility to classify voice audio as safe or malicious, serve the
classifier over HTTP, and train and evaluate its classification head
"""

import sys
from src.main import main

if __name__ == "__main__":
    sys.exit(main())
