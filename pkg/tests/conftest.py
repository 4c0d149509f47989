import sys
from pathlib import Path

# Test modules import shared utilities from tests/helpers.py regardless of
# how pytest was invoked.
sys.path.insert(0, str(Path(__file__).parent))
