import math
import os
import numpy as np
import pytest

from constants import *
from generic import ConfigError, GPFitError, SearchError
from dataio import load_dataset
from training import TrainConfig
from twinvae import ModelConfig
from hyperopt import Dimension, SearchSpace, apply_hyperparameters, expected_improvement, gp_fit, gp_predict, \
    load_history, run_search, training_objective, write_best_trial

POINTS = np.array([[0.1, 0.2], [0.8, 0.3], [0.4, 0.9], [0.6, 0.6], [0.2, 0.7]])
VALUES = np.array([1.0, -0.5, 2.0, 0.3, 0.8])


def _line_space():
    return SearchSpace([Dimension('x', 0.0, 1.0)])


def test_gp_interpolates_its_data():
    model = gp_fit(POINTS, VALUES, length_scales=0.3, signal=1.0)
    for point, value in zip(POINTS, VALUES):
        mean, variance = gp_predict(model, point)
        assert abs(mean - value) <= 1e-6
        assert variance <= 1e-6


def test_gp_variance_far_from_the_data():
    model = gp_fit(POINTS, VALUES, length_scales=0.2, signal=1.0)
    mean, variance = gp_predict(model, np.array([50.0, 50.0]))
    assert variance == pytest.approx(model.signal_variance, rel=0.05)
    assert mean == pytest.approx(VALUES.mean())


def test_gp_fit_optimizes_the_likelihood():
    fixed = gp_fit(POINTS, VALUES, length_scales=5.0, signal=0.01)
    fitted = gp_fit(POINTS, VALUES)
    assert np.isfinite(fitted.log_marginal_likelihood())
    assert fitted.log_marginal_likelihood() >= fixed.log_marginal_likelihood()
    means, variances = gp_predict(fitted, POINTS)
    assert means.shape == (5,) and (variances >= 0).all()


def test_gp_fit_rejects_bad_data():
    with pytest.raises(GPFitError):
        gp_fit(POINTS, [1.0, np.nan, 0.0, 0.0, 0.0])
    with pytest.raises(GPFitError):
        gp_fit(POINTS, [1.0, 2.0])


def test_expected_improvement_is_non_negative():
    rng = np.random.default_rng(0)
    mean = rng.normal(size=500)
    variance = rng.uniform(0.0, 2.0, size=500)
    assert (expected_improvement(mean, variance, 0.0) >= 0).all()
    assert expected_improvement(-1.0, 0.0, 0.5) == pytest.approx(1.5)
    assert expected_improvement(1.0, 0.0, 0.5) == 0.0
    assert expected_improvement(0.0, 1.0, 0.0) == pytest.approx(1.0 / math.sqrt(2.0 * math.pi))


def test_dimension_mapping():
    d = Dimension('latent_dim', 32, 512, SCALE_LOG, True)
    assert d.from_unit(0.0) == 32
    assert d.from_unit(1.0) == 512
    assert d.from_unit(0.5) == 128
    assert d.to_unit(32) == pytest.approx(0.0)
    assert Dimension('x', -1.0, 1.0).from_unit(0.75) == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        Dimension('x', 0.0, 1.0, SCALE_LOG).validate()
    with pytest.raises(ConfigError):
        Dimension('x', 1.0, 1.0).validate()


def test_search_space_from_dict():
    space = SearchSpace.from_dict({'dimensions': [{'name': 'w_rec', 'low': 1, 'high': 10, 'scale': SCALE_LOG}]})
    assert space.names == ['w_rec']
    with pytest.raises(ConfigError):
        SearchSpace.from_dict({'dimension': []})
    with pytest.raises(ConfigError):
        SearchSpace.from_dict({'dimensions': [{'name': 'x', 'low': 0, 'hi': 1}]})
    with pytest.raises(ConfigError):
        SearchSpace([Dimension('x', 0, 1), Dimension('x', 0, 2)]).validate()
    assert SearchSpace().names == [d['name'] for d in HPO_DEFAULT_SPACE]


def test_initial_points_are_halton():
    result = run_search(_line_space(), 3, lambda c: c['x'], verbose=False)
    assert [t.point for t in result.trials] == [[0.5], [0.25], [0.75]]
    assert result.best.raw_config['x'] == 0.25


def test_search_finds_the_minimum_of_a_quadratic():
    result = run_search(_line_space(), 20, lambda c: (c['x'] - 0.3) ** 2, seed=0, verbose=False)
    assert len(result.trials) == 20
    assert abs(result.best.raw_config['x'] - 0.3) <= 1e-2


def test_search_is_seeded():
    first = run_search(_line_space(), 8, lambda c: (c['x'] - 0.7) ** 2, seed=5, verbose=False)
    second = run_search(_line_space(), 8, lambda c: (c['x'] - 0.7) ** 2, seed=5, verbose=False)
    assert [t.point for t in first.trials] == [t.point for t in second.trials]


def test_history_resume(tmp_path):
    history = str(tmp_path / HPO_HISTORY_FILENAME)
    calls = []

    def _objective(config):
        calls.append(config['x'])
        return (config['x'] - 0.4) ** 2

    run_search(_line_space(), 3, _objective, history_file=history, verbose=False)
    assert len(calls) == 3
    result = run_search(_line_space(), 5, _objective, history_file=history, verbose=False)
    assert len(calls) == 5
    assert len(result.trials) == 5
    assert [t.index for t in load_history(history)] == [0, 1, 2, 3, 4]

    best_file = write_best_trial(result, str(tmp_path / HPO_BEST_FILENAME), quiet=True)
    assert os.path.exists(best_file)


def test_failed_trials_are_recorded():
    def _objective(config):
        if config['x'] > 0.6:
            raise RuntimeError('diverged')
        return config['x']

    result = run_search(_line_space(), 5, _objective, verbose=False)
    failed = [t for t in result.trials if t.status == TRIAL_FAILED]
    assert failed and all('diverged' in t.error for t in failed)
    assert result.best.completed

    with pytest.raises(SearchError):
        run_search(_line_space(), 3, lambda c: float('nan'), verbose=False)


def test_parallel_search():
    result = run_search(_line_space(), 6, lambda c: (c['x'] - 0.5) ** 2, workers=3, verbose=False)
    assert len(result.trials) == 6
    assert sorted(t.index for t in result.trials) == list(range(6))


def test_search_rejects_bad_budget():
    with pytest.raises(ConfigError):
        run_search(_line_space(), 0, lambda c: 0.0, verbose=False)


def test_apply_hyperparameters():
    model_config, train_config = ModelConfig(), TrainConfig()
    raw = {'learning_rate': 1e-3, 'latent_dim': 64, 'shared_conv_channels': 100, 'w_rec': 5.0, 'w_regr': 1.0,
           'w_kld': 0.5}
    new_model, new_train = apply_hyperparameters(raw, model_config, train_config)
    assert new_model.latent_dim == 64 and new_model.shared_encoder_channels == 100
    assert new_train.optimizer.learning_rate == 1e-3
    assert (new_train.weights.w_rec, new_train.weights.w_regr, new_train.weights.w_kld) == (5.0, 1.0, 0.5)
    assert model_config.latent_dim == MODEL_LATENT_DIM
    assert train_config.weights.w_rec == LOSS_W_REC
    with pytest.raises(ConfigError):
        apply_hyperparameters({'momentum': 0.9}, model_config, train_config)


def test_training_objective(small_model_config, syn_dir, nat_dir, tmp_path):
    objective = training_objective(small_model_config, TrainConfig(batch_size=4, seed=1), load_dataset(nat_dir),
                                   load_dataset(syn_dir), search_epochs=2, run_root=str(tmp_path / 'trials'))
    value = objective({'learning_rate': 1e-3, 'w_kld': 1.0})
    assert np.isfinite(value) and value >= 0.0
    assert os.path.exists(os.path.join(str(tmp_path / 'trials'), 'trial_0000', LOSS_LOG_FILENAME))


def _learning_rate_space():
    return SearchSpace([Dimension('learning_rate', 1e-4, 1e-2, SCALE_LOG)])


def test_parallel_training_trials_are_deterministic(syn_dir, nat_dir):
    model_config = ModelConfig(channel_scale=0.125, latent_dim=8, dropout_rate=0.1)
    nat, syn = load_dataset(nat_dir), load_dataset(syn_dir)
    histories = []
    for _ in range(2):
        objective = training_objective(model_config, TrainConfig(batch_size=4, seed=1), nat, syn, search_epochs=2)
        result = run_search(_learning_rate_space(), 2, objective, seed=3, workers=2, verbose=False)
        histories.append([(t.index, t.point, t.objective) for t in result.trials])
    assert histories[0] == histories[1]


def test_resumed_search_keeps_earlier_trial_directories(small_model_config, syn_dir, nat_dir, tmp_path):
    run_root = str(tmp_path / 'trials')
    history = str(tmp_path / HPO_HISTORY_FILENAME)
    objective = training_objective(small_model_config, TrainConfig(batch_size=4, seed=1), load_dataset(nat_dir),
                                   load_dataset(syn_dir), search_epochs=1, run_root=run_root)
    run_search(_learning_rate_space(), 1, objective, history_file=history, verbose=False)
    first_log = os.path.join(run_root, 'trial_0000', LOSS_LOG_FILENAME)
    with open(first_log) as f:
        before = f.read()

    objective = training_objective(small_model_config, TrainConfig(batch_size=4, seed=1), load_dataset(nat_dir),
                                   load_dataset(syn_dir), search_epochs=1, run_root=run_root)
    result = run_search(_learning_rate_space(), 2, objective, history_file=history, verbose=False)
    assert [t.index for t in result.trials] == [0, 1]
    assert os.path.exists(os.path.join(run_root, 'trial_0001', LOSS_LOG_FILENAME))
    with open(first_log) as f:
        assert f.read() == before
