import json

import pytest

from core.tensors import gen_gaussian_qkv
from interface.cli import run_cli


@pytest.fixture
def small_qkv():
    return gen_gaussian_qkv(40, 8, seed=3)


@pytest.fixture
def cli(capsys):
    """Runs the command line in-process; returns (exit code, stdout, stderr)."""

    def invoke(*argv):
        code = run_cli([str(a) for a in argv])
        out, err = capsys.readouterr()
        return code, out, err

    return invoke


@pytest.fixture
def cli_json(cli):
    def invoke(*argv):
        code, out, err = cli(*argv)
        assert code == 0, err
        return json.loads(out)

    return invoke
