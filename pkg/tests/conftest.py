import sys
from pathlib import Path

# make sibling helper modules (synthdata) importable from every test file
sys.path.insert(0, str(Path(__file__).parent))
