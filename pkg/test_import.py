#!/usr/bin/env python3
import sys
from src.guard.config import resolve_engine_config, setup_environment
if __name__ == "__main__":
    setup_environment()
    cfg = resolve_engine_config()
    print(f"Setup environment successful! backend={cfg.backend.kind} threshold={cfg.threshold}")
    sys.exit(0)
