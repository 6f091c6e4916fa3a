import sys
from pathlib import Path

# make the synth helper importable from any test module
sys.path.insert(0, str(Path(__file__).parent))
