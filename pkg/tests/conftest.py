import ast
import sysconfig
from pathlib import Path

import numpy as np
import pytest

# stdlib modules whose docstrings make up the text fixture
_DOC_MODULES = [
    "argparse", "collections/__init__", "configparser", "csv", "dataclasses", "datetime",
    "decimal", "difflib", "email/message", "functools", "inspect", "logging/__init__",
    "pathlib", "pickle", "shutil", "statistics", "string", "subprocess", "tarfile",
    "textwrap", "threading", "typing", "unittest/case", "urllib/parse", "zipfile",
    "_pydecimal", "pydoc", "tempfile", "heapq", "fractions", "calendar", "gettext",
]


def stdlib_docstring_text(min_bytes: int = 120_000) -> str:
    """Deterministic English-ish text built from stdlib docstrings."""
    root = Path(sysconfig.get_paths()["stdlib"])
    parts = []
    size = 0
    for name in _DOC_MODULES:
        path = root / f"{name}.py"
        if not path.exists():
            continue
        tree = ast.parse(path.read_text(encoding="utf-8"))
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc:
                    text = doc.encode("ascii", "ignore").decode() + "\n\n"
                    parts.append(text)
                    size += len(text)
        if size >= min_bytes:
            break
    return "".join(parts)


@pytest.fixture(scope="session")
def text_corpus(tmp_path_factory):
    text = stdlib_docstring_text()
    path = tmp_path_factory.mktemp("corpus") / "docstrings.txt"
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ----------------------------------------------------------

_VERDICTS = []


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line; returns ``passed`` for the caller to assert."""

    def record(number, title, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _VERDICTS.append((number, line))
        with capsys.disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _n, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
