import sys
from pathlib import Path

# allow tests to import sibling helper modules (rayoracle, etc.)
sys.path.insert(0, str(Path(__file__).parent))
