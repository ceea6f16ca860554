"""Collect the standalone ``verify_*.py`` check scripts as pytest items.

Each script is run exactly as ``scripts/run_all_verifications.sh`` runs it
(``python tests/verify_X.py``); the item passes when the script exits 0.
"""

from __future__ import annotations

import subprocess
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]


def pytest_collect_file(parent, file_path):
    if file_path.suffix == ".py" and file_path.name.startswith("verify_"):
        return VerifyScript.from_parent(parent, path=file_path)
    return None


class VerifyScript(pytest.File):
    def collect(self):
        yield VerifyItem.from_parent(self, name=self.path.stem)


class VerifyItem(pytest.Item):
    def runtest(self):
        proc = subprocess.run(
            [sys.executable, str(self.path)],
            cwd=ROOT,
            capture_output=True,
            text=True,
        )
        self.add_report_section("call", "stdout", proc.stdout)
        self.add_report_section("call", "stderr", proc.stderr)
        if proc.returncode != 0:
            raise VerifyFailed(proc)

    def repr_failure(self, excinfo):
        if isinstance(excinfo.value, VerifyFailed):
            proc = excinfo.value.proc
            return f"{self.path.name} exited {proc.returncode}\n{proc.stdout}\n{proc.stderr}"
        return super().repr_failure(excinfo)

    def reportinfo(self):
        return self.path, None, self.name


class VerifyFailed(Exception):
    def __init__(self, proc):
        super().__init__(proc.returncode)
        self.proc = proc
