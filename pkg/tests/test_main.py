"""Tests for __main__ module."""

import os
import subprocess
import sys
from pathlib import Path

SRC = Path(__file__).resolve().parents[1] / "src"


def describe_main_module():
    def it_imports_main_from_cli():
        from inear_anc import __main__
        from inear_anc.cli import main

        assert __main__.main is main

    def it_can_be_run_as_module():
        env = {**os.environ, "PYTHONPATH": os.pathsep.join(
            filter(None, [str(SRC), os.environ.get("PYTHONPATH")]))}
        result = subprocess.run(
            [sys.executable, "-m", "inear_anc", "--help"],
            capture_output=True,
            text=True,
            timeout=60,
            env=env,
        )
        assert result.returncode == 0
        assert "In-ear ANC" in result.stdout
