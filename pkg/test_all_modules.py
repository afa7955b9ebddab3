"""
Command-line smoke tests: every subcommand end to end on a tiny experiment
"""
import json
import os

import pytest

from checkpoint_manager import CheckpointManager, write_checkpoint
from grad_suite import LOSS_CHECKS, OP_CHECKS
from main import COMMANDS, HANDLERS, main
from segmentor import init_params
from synth_data import generate_dataset, write_dataset


@pytest.fixture
def config_file(tiny_config, tmp_path):
    return tiny_config.with_overrides(EPOCHS=1).to_file(str(tmp_path / "experiment.env"))


def run_cli(capsys, *argv):
    """Exit status, the JSON summary on stdout (if any) and the JSON records on stderr"""
    code = main(list(argv))
    captured = capsys.readouterr()
    out = [json.loads(line) for line in captured.out.splitlines() if line.startswith('{')]
    err = [json.loads(line) for line in captured.err.splitlines() if line.startswith('{')]
    return code, (out[-1] if out else None), err


def test_pipeline_end_to_end(capsys, config_file, tiny_config):
    code, summary, _ = run_cli(capsys, 'gen-data', '--config', config_file, '--seed', '5')
    assert code == 0
    assert summary['manifest']['global_seed'] == 5
    assert os.path.exists(tiny_config.DATASET_PATH)

    code, summary, _ = run_cli(capsys, 'train-teacher', '--config', config_file)
    assert code == 0
    assert summary['checkpoint'].endswith('teacher.ckpt')
    assert len(summary['checksum']) == 16

    code, summary, _ = run_cli(capsys, 'train-student', '--config', config_file, '--toggles', 'sup,mad,cmd')
    assert code == 0
    assert summary['toggles'] == {'mad': True, 'umd': False, 'cmd': True, 'fused_kd': False}
    student = summary['checkpoint']

    code, summary, _ = run_cli(capsys, 'eval', '--config', config_file, '--checkpoint', student, '--xlsx')
    assert code == 0
    assert len(summary['rows']) == 15
    assert os.path.exists(summary['csv']) and os.path.exists(summary['xlsx'])
    assert summary['csv'] == os.path.join(tiny_config.OUTPUT_DIR, 'anymodal_eval.csv')


def test_gradcheck_command(capsys):
    code, summary, _ = run_cli(capsys, 'gradcheck', '--trials', '1')
    assert code == 0
    assert set(summary['max_error']) == set(OP_CHECKS) | set(LOSS_CHECKS)
    assert max(summary['max_error'].values()) < 1e-4


def test_unknown_command_exits_with_usage_status(capsys):
    with pytest.raises(SystemExit) as info:
        main(['frobnicate'])
    assert info.value.code == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record['error'] == 'ArgumentError'


def test_eval_requires_checkpoint(capsys, config_file):
    code, summary, err = run_cli(capsys, 'eval', '--config', config_file)
    assert code == 1 and summary is None
    assert err[-1]['error'] == 'ConfigError'


def test_missing_teacher_checkpoint(capsys, config_file, tmp_path):
    run_cli(capsys, 'gen-data', '--config', config_file)
    code, _, err = run_cli(capsys, 'train-student', '--config', config_file,
                           '--checkpoint', str(tmp_path / "absent.ckpt"))
    assert code == 1
    assert err[-1]['error'] == 'FileNotFoundError'


@pytest.mark.parametrize("argv", [('--toggles', 'sup,distill'), ('--seed', '-3'), ('--seed', 'abc')])
def test_invalid_overrides(capsys, config_file, argv):
    code, _, err = run_cli(capsys, 'train-teacher', '--config', config_file, *argv)
    assert code == 1
    assert err[-1]['error'] == 'ConfigError'


def test_every_command_is_dispatched():
    assert set(HANDLERS) == set(COMMANDS)


@pytest.fixture
def untrained_checkpoint(tiny_config, tmp_path):
    params = init_params(tiny_config.CHANNELS, tiny_config.DECODER_CHANNELS, tiny_config.NUM_CLASSES, seed=3)
    return write_checkpoint(params, str(tmp_path / "untrained.ckpt"))


def _eval_config(tiny_config, tmp_path, modalities=('R', 'D', 'E', 'L'), count=5):
    eval_path = str(tmp_path / "data" / "eval.anyseg")
    samples, manifest = generate_dataset(count, 16, 16, tiny_config.NUM_CLASSES, modalities, global_seed=77)
    write_dataset(samples, manifest, eval_path)
    config = tiny_config.with_overrides(EVAL_DATASET_PATH=eval_path)
    return config.to_file(str(tmp_path / "eval.env"))


def test_eval_scores_every_sample_of_a_dedicated_file(capsys, tiny_config, tmp_path, untrained_checkpoint):
    config_path = _eval_config(tiny_config, tmp_path)
    code, summary, _ = run_cli(capsys, 'eval', '--config', config_path, '--checkpoint', untrained_checkpoint)
    assert code == 0
    assert summary['samples'] == 5
    assert summary['dataset'].endswith('eval.anyseg')
    assert len(summary['rows']) == 15


def test_eval_rejects_dataset_without_configured_modalities(capsys, tiny_config, tmp_path, untrained_checkpoint):
    config_path = _eval_config(tiny_config, tmp_path, modalities=('R', 'D'))
    code, summary, err = run_cli(capsys, 'eval', '--config', config_path, '--checkpoint', untrained_checkpoint)
    assert code == 1 and summary is None
    assert err[-1]['error'] == 'ConfigError'
    assert err[-1]['context']['missing'] == ['E', 'L']


def test_checkpoints_command_lists_and_cleans(capsys, config_file, tiny_config):
    params = init_params(tiny_config.CHANNELS, tiny_config.DECODER_CHANNELS, tiny_config.NUM_CLASSES, seed=3)
    manager = CheckpointManager(tiny_config.OUTPUT_DIR)
    for age, name in enumerate(['s2', 's1', 'teacher']):
        path = manager.save_checkpoint(params, name)
        stamp = 1_700_000_000 - 100 * age
        os.utime(path, (stamp, stamp))

    code, summary, _ = run_cli(capsys, 'checkpoints', '--config', config_file)
    assert code == 0
    assert summary['total_checkpoints'] == 3 and summary['deleted'] == 0
    assert [c['filename'] for c in summary['checkpoints']] == ['s2.ckpt', 's1.ckpt', 'teacher.ckpt']

    code, summary, _ = run_cli(capsys, 'checkpoints', '--config', config_file, '--keep', '1')
    assert code == 0
    assert summary['deleted'] == 1
    assert sorted(c['filename'] for c in summary['checkpoints']) == ['s2.ckpt', 'teacher.ckpt']


def test_checkpoints_rejects_negative_keep(capsys, config_file):
    code, _, err = run_cli(capsys, 'checkpoints', '--config', config_file, '--keep', '-1')
    assert code == 1
    assert err[-1]['error'] == 'ConfigError'
