#!/usr/bin/env python3
"""
parsegrid ルート実行スクリプト

例:
    python parsegrid.py synth --count 10 --k 5 --out data/synth
    python parsegrid.py train --config configs/toy.cfg --workers 4
    python parsegrid.py eval --config configs/toy.cfg --tta
"""
import sys

from src.parsegrid_main import main

if __name__ == "__main__":
    sys.exit(main())
