import os
import pandas as pd
import pytest
import simplejson

from constants import *
from twincount import main

TINY_CONFIG = {'seed': 2,
               'model': {'channel_scale': 0.125, 'latent_dim': 8, 'dropout_rate': 0.0},
               'train': {'batch_size': 4, 'max_epochs': 2, 'regressor_start_epoch': 1},
               'search': {'dimensions': [{'name': 'learning_rate', 'low': 1e-4, 'high': 1e-2, 'scale': SCALE_LOG},
                                         {'name': 'w_kld', 'low': 0.5, 'high': 4.0}]}}


def _write_config(path, data):
    with open(path, 'w') as f:
        simplejson.dump(data, f)
    return path


@pytest.fixture(scope='module')
def trained_run(tmp_path_factory, syn_dir, nat_dir):
    root = tmp_path_factory.mktemp('cli')
    config = _write_config(str(root / 'tiny.json'), TINY_CONFIG)
    run = str(root / 'run')
    assert main(['train', '-c', config, '--nat', nat_dir, '--syn', syn_dir, '-o', run]) == EXIT_OK
    return config, run


def test_version_and_help(capsys):
    assert main(['--version']) == EXIT_OK
    assert VERSION in capsys.readouterr().out
    assert main(['--help']) == EXIT_OK
    assert main(['train', '--help']) == EXIT_OK


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(['frobnicate']) == EXIT_USAGE
    assert main(['generate', '-o', 'x']) == EXIT_USAGE
    assert main(['generate', '-n', 'three']) == EXIT_USAGE
    assert main(['generate', '-n', '1', '--health']) == EXIT_USAGE


def test_generate(tmp_path):
    out = str(tmp_path / 'gen')
    assert main(['gen', '-n', '3', '-s', '4', '--style', STYLE_SYN_BF, '--labeled', '2', '-o', out]) == EXIT_OK
    table = pd.read_csv(os.path.join(out, MANIFEST_FILENAME), dtype=str, keep_default_na=False)
    assert len(table) == 3
    assert (table['count'] != '').sum() == 2
    assert not os.path.exists(os.path.join(out, RUN_LOCK_FILENAME))
    with open(os.path.join(out, RUN_RECORD_FILENAME)) as f:
        record = simplejson.load(f)
    assert record['command'] == 'generate' and record['seed'] == 4
    assert record['config']['generator']['style'] == STYLE_SYN_BF


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_SEED, '17')
    out = str(tmp_path / 'gen')
    assert main(['generate', '-n', '1', '-o', out]) == EXIT_OK
    with open(os.path.join(out, RUN_RECORD_FILENAME)) as f:
        assert simplejson.load(f)['seed'] == 17


def test_validation_errors(tmp_path):
    bad = _write_config(str(tmp_path / 'bad.json'), {'modle': {}})
    assert main(['generate', '-n', '1', '-c', bad, '-o', str(tmp_path / 'x')]) == EXIT_VALIDATION
    assert main(['evaluate', '-k', 'missing.ckpt', '-d', str(tmp_path / 'nothing'), '-o', str(tmp_path / 'ev')]) \
        == EXIT_VALIDATION
    assert main(['train', '-o', str(tmp_path / 'run')]) == EXIT_VALIDATION


def test_health(tmp_path, capsys):
    good = _write_config(str(tmp_path / 'good.json'), TINY_CONFIG)
    bad = _write_config(str(tmp_path / 'bad.json'), {'train': {'batch_size': 'big'}})
    assert main(['generate', '-n', '1', '--health', '-c', good]) == EXIT_OK
    assert 'No errors found' in capsys.readouterr().out
    assert main(['generate', '-n', '1', '--health', '-c', bad]) == EXIT_VALIDATION
    assert 'batch_size' in capsys.readouterr().out


def test_locked_run_directory(tmp_path):
    out = tmp_path / 'locked'
    out.mkdir()
    (out / RUN_LOCK_FILENAME).write_text('1')
    assert main(['generate', '-n', '1', '-o', str(out)]) == EXIT_RUNTIME


def test_train_outputs(trained_run):
    _, run = trained_run
    for filename in [BEST_CHECKPOINT_FILENAME, LAST_CHECKPOINT_FILENAME, LOSS_LOG_FILENAME, RUN_RECORD_FILENAME]:
        assert os.path.exists(os.path.join(run, filename))
    assert len(pd.read_csv(os.path.join(run, LOSS_LOG_FILENAME))) == 2


def test_evaluate(trained_run, syn_dir, tmp_path):
    _, run = trained_run
    out = str(tmp_path / 'ev')
    checkpoint = os.path.join(run, BEST_CHECKPOINT_FILENAME)
    assert main(['evaluate', '-k', checkpoint, '-d', syn_dir, '-o', out, '-g', '-e']) == EXIT_OK
    with open(os.path.join(out, METRICS_FILENAME)) as f:
        assert simplejson.load(f)['n'] == 12
    assert os.path.exists(os.path.join(out, PER_COUNT_GRAPH_FILENAME))
    assert os.path.exists(os.path.join(out, 'metrics.xlsx'))


def test_translate_and_embed(trained_run, syn_dir, nat_dir, tmp_path):
    _, run = trained_run
    checkpoint = os.path.join(run, BEST_CHECKPOINT_FILENAME)
    out = str(tmp_path / 'xl')
    assert main(['translate', '-k', checkpoint, '-d', nat_dir, '--to', DOMAIN_SYN, '--limit', '2', '-o', out]) \
        == EXIT_OK
    with open(os.path.join(out, TRANSLATIONS_FILENAME)) as f:
        assert len(f.readlines()) == 2

    out = str(tmp_path / 'em')
    assert main(['embed', '-k', checkpoint, '-d', nat_dir, '-d', syn_dir, '-o', out]) == EXIT_OK
    assert len(pd.read_csv(os.path.join(out, LATENTS_FILENAME))) == 22


def test_baseline(syn_dir, tmp_path):
    out = str(tmp_path / 'cv')
    assert main(['baseline', '-d', syn_dir, '--style', STYLE_SYN_PC, '-o', out]) == EXIT_OK
    assert len(pd.read_csv(os.path.join(out, GRID_RESULTS_FILENAME))) == 1

    grid = _write_config(str(tmp_path / 'grid.json'), {'threshold': [0.5, 0.6], 'crop_margin': [0],
                                                       'blur_kernel': [3], 'polarity': [POLARITY_BRIGHT],
                                                       'distance_peak_min': [4], 'min_region_area': [12]})
    out = str(tmp_path / 'cv_grid')
    assert main(['cv', '-d', syn_dir, '--grid', grid, '-o', out, '-e']) == EXIT_OK
    assert len(pd.read_csv(os.path.join(out, GRID_RESULTS_FILENAME))) == 2
    assert os.path.exists(os.path.join(out, GRID_EXCEL_FILENAME + '.xlsx'))


def test_hpo(trained_run, syn_dir, nat_dir, tmp_path):
    config, _ = trained_run
    out = str(tmp_path / 'hpo')
    args = ['hpo', '-c', config, '--nat', nat_dir, '--syn', syn_dir, '-b', '2', '--search-epochs', '1', '-o', out]
    assert main(args) == EXIT_OK
    with open(os.path.join(out, HPO_BEST_FILENAME)) as f:
        assert simplejson.load(f)['completed'] == 2
    # a larger budget resumes the history
    args[args.index('-b') + 1] = '3'
    assert main(args) == EXIT_OK
    with open(os.path.join(out, HPO_HISTORY_FILENAME)) as f:
        assert len(f.readlines()) == 3
