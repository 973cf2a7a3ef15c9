import pytest

import main as main_module
from main import EXIT_ERROR, EXIT_OK, build_parser, main


def test_oracle_command_writes_deterministic_results(tmp_path):
    first, second = tmp_path / 'first', tmp_path / 'second'
    for out in (first, second):
        assert main(['oracle-validate', '--scale', 'ci', '--seed', '1', '--out', str(out)]) \
            == EXIT_OK
    assert (first / 'oracle.csv').read_bytes() == (second / 'oracle.csv').read_bytes()
    assert (first / 'oracle-validate_summary.txt').exists()
    assert 'seed: 1' in (first / 'oracle-validate_config.yaml').read_text(encoding='utf-8')


def test_invalid_config_exits_with_error(tmp_path):
    config = tmp_path / 'bad.yaml'
    config.write_text('experiment: lqg-bounds\nlqg:\n  H: 0\n', encoding='utf-8')
    assert main(['lqg-bounds', '--config', str(config), '--out', str(tmp_path)]) == EXIT_ERROR
    assert main(['lqg-bounds', '--config', str(tmp_path / 'absent.yaml')]) == EXIT_ERROR


def test_parser_rejects_unknown_scale():
    with pytest.raises(SystemExit):
        build_parser().parse_args(['coverage-sweep', '--scale', 'huge'])
    args = build_parser().parse_args(['browse'])
    assert args.out == 'results'


def test_missing_default_config_still_honours_out(tmp_path, monkeypatch):
    monkeypatch.setattr(main_module, 'SCRIPT_DIR', tmp_path / 'no_data')
    out = tmp_path / 'chosen'
    assert main(['oracle-validate', '--scale', 'ci', '--seed', '4', '--out', str(out)]) == EXIT_OK
    assert (out / 'oracle.csv').exists()
    saved = (out / 'oracle-validate_config.yaml').read_text(encoding='utf-8')
    assert 'seed: 4' in saved
    assert str(out) in saved
