import subprocess
import sys
from pathlib import Path

import pytest

DEMOS = Path(__file__).resolve().parents[1] / "demos"


@pytest.mark.parametrize("argv", [
    ["grading_walkthrough.py", "--out", "{tmp}"],
    ["noise_sweep.py", "--small", "--eps", "0", "0.3"],
])
def test_demo_runs(argv, tmp_path):
    argv = [a.format(tmp=tmp_path) for a in argv]
    proc = subprocess.run([sys.executable, str(DEMOS / argv[0]), *argv[1:]],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip()
    if argv[0] == "grading_walkthrough.py":
        assert list(tmp_path.glob("*.png"))
