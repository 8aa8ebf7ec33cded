import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"
