import pytest

from src import verify
from src.utils import ConfigError


def _failed(checks):
    return [(name, detail) for name, passed, detail in checks if not passed]


def test_qp_checks_pass():
    assert _failed(verify.check_qp(num_problems=20)) == []


def test_consensus_checks_pass():
    assert _failed(verify.check_consensus(num_instances=10)) == []


def test_short_descent_checks_pass():
    assert _failed(verify.check_descent(rounds=10)) == []


def test_run_suite_prints_one_line_per_check(capsys, monkeypatch):
    monkeypatch.setitem(verify.SUITES, 'toy', lambda: [('always', True, ''), ('never', False, 'why not')])
    assert not verify.run_suite('toy')
    lines = capsys.readouterr().out.splitlines()
    assert lines == ['PASS  always', 'FAIL  never  (why not)']


def test_unknown_suite():
    with pytest.raises(ConfigError, match='suite'):
        verify.run_suite('everything')
