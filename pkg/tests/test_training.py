import math
import os
import numpy as np
import pandas as pd
import pytest
import torch

from constants import *
from generic import ConfigError, DatasetError, DivergenceError, derive_seed
from dataio import Batch, load_dataset
from twinvae import ForwardOutput, LatentCode, init_params, load_checkpoint
from training import Adam, LossWeights, OptimizerConfig, RAdam, TrainConfig, apply_preset, combine_losses, \
    effective_rec_weight, kld_loss, make_optimizer, optimizer_step, radam_rho, regr_loss, train, twin_loss


def _tiny_train_config(**kwargs):
    values = dict(batch_size=4, max_epochs=3, regressor_start_epoch=1, seed=3, checkpoint_every=1)
    values.update(kwargs)
    return TrainConfig(**values)


def test_kld_oracle():
    assert float(kld_loss(torch.zeros(1), torch.zeros(1))) == 0.0
    assert float(kld_loss(torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))) == \
        pytest.approx(0.5, abs=1e-12)
    value = kld_loss(torch.zeros(1, dtype=torch.float64), torch.tensor([math.log(4.0)], dtype=torch.float64))
    assert float(value) == pytest.approx(0.806853, abs=1e-6)
    # summed over latent dimensions, averaged over the batch
    mu = torch.ones(3, 4, dtype=torch.float64)
    assert float(kld_loss(mu, torch.zeros(3, 4, dtype=torch.float64))) == pytest.approx(2.0, abs=1e-12)


def test_regression_loss_without_labels_is_zero():
    estimate = torch.tensor([1.0, 2.0], requires_grad=True)
    assert float(regr_loss(estimate, [float('nan'), float('nan')])) == 0.0
    assert float(regr_loss(estimate, [3.0, float('nan')])) == pytest.approx(2.0)


def test_regression_loss_averages_over_the_whole_batch():
    estimate = torch.tensor([5.0, 1.0, 1.0, 1.0])
    nan = float('nan')
    assert float(regr_loss(estimate, [7.0, nan, nan, nan])) == pytest.approx(1.0)
    assert float(regr_loss(estimate, [7.0, 2.0, 1.0, 1.0])) == pytest.approx(1.25)


def _bce(x, r):
    r = np.clip(r, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -np.mean(x * np.log(r) + (1.0 - x) * np.log(1.0 - r))


def test_loss_decomposition():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        weights = LossWeights(w_rec=rng.uniform(0, 200), w_regr=rng.uniform(0, 10), w_kld=rng.uniform(0, 5),
                              rec_kind=[LOSS_MSE, LOSS_BCE][int(rng.integers(0, 2))])
        epoch = int(rng.integers(0, 5000))
        regress = bool(rng.random() < 0.7)
        outputs, batches, expected = {}, {}, 0.0
        for domain in DOMAINS:
            n = int(rng.integers(1, 5))
            images = rng.random((n, IMAGE_SIZE, IMAGE_SIZE))
            recon = rng.uniform(0.01, 0.99, size=(n, 1, IMAGE_SIZE, IMAGE_SIZE))
            mu, logvar = rng.normal(size=(n, 4)), 0.5 * rng.normal(size=(n, 4))
            labels = [int(rng.integers(1, 31)) if rng.random() < 0.5 else None for _ in range(n)]
            count = rng.normal(5.0, 3.0, size=n)
            outputs[domain] = ForwardOutput(torch.tensor(recon), LatentCode(torch.tensor(mu), torch.tensor(logvar)),
                                            torch.tensor(count))
            batches[domain] = Batch(images, labels, domain, ['x%d' % i for i in range(n)])

            rec = np.mean((images - recon[:, 0]) ** 2) if weights.rec_kind == LOSS_MSE else _bce(images, recon[:, 0])
            kld = np.mean(-0.5 * np.sum(1.0 + logvar - mu ** 2 - np.exp(logvar), axis=1))
            # unlabeled samples count with a regression error of 0
            regr = sum((c - l) ** 2 for c, l in zip(count, labels) if l is not None) / n
            expected += effective_rec_weight(weights, domain, epoch) * rec + weights.w_kld * kld
            if regress:
                expected += weights.w_regr * regr

        report = twin_loss(outputs[DOMAIN_NAT], outputs[DOMAIN_SYN], batches[DOMAIN_NAT], batches[DOMAIN_SYN],
                           weights, epoch, regress)
        assert float(report.total) == pytest.approx(expected, rel=1e-6)
        components = {name: float(getattr(report, name)) for name in report.COMPONENTS}
        assert combine_losses(components, weights, epoch, regress) == pytest.approx(float(report.total), rel=1e-6)


def test_missing_domain_counts_as_zero():
    output = ForwardOutput(torch.full((2, 1, IMAGE_SIZE, IMAGE_SIZE), 0.5, dtype=torch.float64),
                           LatentCode(torch.zeros(2, 4, dtype=torch.float64), torch.zeros(2, 4, dtype=torch.float64)),
                           torch.zeros(2, dtype=torch.float64))
    batch = Batch(np.full((2, IMAGE_SIZE, IMAGE_SIZE), 0.5), [None, None], DOMAIN_NAT, ['a', 'b'])
    report = twin_loss(output, None, batch, None, LossWeights(), 0)
    assert float(report.total) == 0.0
    assert float(report.rec_syn) == 0.0 and float(report.regr_nat) == 0.0


def test_effective_reconstruction_weight():
    mse = LossWeights(w_rec=100.0)
    assert effective_rec_weight(mse, DOMAIN_NAT, 1000) == 100.0
    bce = LossWeights(w_rec=100.0, rec_kind=LOSS_BCE, bce_decay_rate=1e-3)
    assert effective_rec_weight(bce, DOMAIN_SYN, 0) == 100.0
    assert effective_rec_weight(bce, DOMAIN_SYN, 10) == pytest.approx(100.0 * 0.999 ** 10)
    bce.bce_decay_mode = BCE_DECAY_ADDITIVE
    assert effective_rec_weight(bce, DOMAIN_SYN, 10) == pytest.approx(99.0)
    assert effective_rec_weight(bce, DOMAIN_SYN, 5000) == 0.0


def test_per_domain_weight_overrides():
    weights = LossWeights(w_rec=10.0, overrides={DOMAIN_NAT: {'w_rec': 1.0}})
    assert combine_losses({'rec_nat': 1.0, 'rec_syn': 1.0}, weights, 0) == pytest.approx(11.0)
    with pytest.raises(ConfigError):
        LossWeights(overrides={'fluo': {}}).validate()
    with pytest.raises(ConfigError):
        LossWeights(overrides={DOMAIN_NAT: {'lr': 1.0}}).validate()


def _quadratic_run(optimizer_cls, steps, lr, weight_decay=0.0, decay_mode=WEIGHT_DECAY_STEP):
    a = torch.tensor([0.5, 1.0, 2.0, 4.0, 8.0], dtype=torch.float64)
    x = torch.tensor([1.0, -2.0, 0.5, 3.0, -0.25], dtype=torch.float64, requires_grad=True)
    optimizer = optimizer_cls([x], lr=lr, weight_decay=weight_decay, decay_mode=decay_mode)
    trajectory = []
    for _ in range(steps):
        optimizer.zero_grad()
        (0.5 * (a * x * x).sum()).backward()
        optimizer_step(optimizer)
        trajectory.append(x.detach().numpy().copy())
    return a.numpy(), trajectory


def _reference(kind, a, x, steps, lr, b1=0.9, b2=0.999, eps=1e-8, weight_decay=0.0):
    m, v = np.zeros_like(x), np.zeros_like(x)
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    trajectory = []
    for t in range(1, steps + 1):
        g = a * x
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        if kind == OPT_ADAM:
            update = lr * m_hat / (np.sqrt(v_hat) + eps)
        else:
            rho_t = rho_inf - 2.0 * t * b2 ** t / (1.0 - b2 ** t)
            if rho_t <= 4.0:
                update = lr * m_hat
            else:
                r = np.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
                update = lr * r * m_hat / (np.sqrt(v_hat) + eps)
        x = (x - update) * (1.0 - weight_decay)
        trajectory.append(x.copy())
    return trajectory


@pytest.mark.parametrize('cls,kind', [(Adam, OPT_ADAM), (RAdam, OPT_RADAM)])
def test_optimizer_matches_reference(cls, kind):
    a, trajectory = _quadratic_run(cls, 10, 0.05, weight_decay=1e-3)
    expected = _reference(kind, a, np.array([1.0, -2.0, 0.5, 3.0, -0.25]), 10, 0.05, weight_decay=1e-3)
    for got, want in zip(trajectory, expected):
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_radam_starts_with_momentum_steps():
    assert all(radam_rho(t, 0.999) <= RADAM_RHO_THRESHOLD for t in range(1, 5))
    assert radam_rho(5, 0.999) > RADAM_RHO_THRESHOLD
    # a plain momentum step: lr * m_hat = lr * g
    x = torch.tensor([2.0], dtype=torch.float64, requires_grad=True)
    optimizer = RAdam([x], lr=0.1)
    (x * x).sum().backward()
    optimizer_step(optimizer)
    assert float(x) == pytest.approx(2.0 - 0.1 * 4.0)


def test_epoch_weight_decay_and_frozen_parameters():
    x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    frozen = torch.tensor([1.0], dtype=torch.float64, requires_grad=False)
    optimizer = make_optimizer([x, frozen], OptimizerConfig(learning_rate=0.1, weight_decay=0.5))
    (x * x).sum().backward()
    optimizer_step(optimizer)
    after_step = float(x)
    assert after_step == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8))
    optimizer.decay_weights()
    assert float(x) == pytest.approx(after_step * 0.5)
    assert float(frozen) == 1.0


def test_non_finite_gradient_raises():
    x = torch.tensor([1.0], requires_grad=True)
    optimizer = Adam([x])
    x.grad = torch.tensor([float('nan')])
    with pytest.raises(DivergenceError):
        optimizer_step(optimizer)


def test_gradients_match_finite_differences(small_model_config):
    model = init_params(small_model_config, 0).double()
    model.train()
    rng = np.random.default_rng(1)
    batch_nat = Batch(rng.random((2, IMAGE_SIZE, IMAGE_SIZE)), [2, None], DOMAIN_NAT, ['a', 'b'])
    batch_syn = Batch(rng.random((2, IMAGE_SIZE, IMAGE_SIZE)), [3, 1], DOMAIN_SYN, ['c', 'd'])
    generator = torch.Generator().manual_seed(0)
    eps_nat = torch.randn(2, small_model_config.latent_dim, generator=generator, dtype=torch.float64)
    eps_syn = torch.randn(2, small_model_config.latent_dim, generator=generator, dtype=torch.float64)
    weights = LossWeights()

    def _loss():
        out_nat = model(batch_nat.images, DOMAIN_NAT, eps=eps_nat)
        out_syn = model(batch_syn.images, DOMAIN_SYN, eps=eps_syn)
        return twin_loss(out_nat, out_syn, batch_nat, batch_syn, weights, epoch=200).total

    model.zero_grad()
    _loss().backward()
    params = dict(model.named_parameters())
    names = ['encoders.nat.0.weight', 'encoders.syn.6.weight', 'shared_encoder.0.weight', 'bottleneck_in.1.weight',
             'mu_head.weight', 'logvar_head.bias', 'bottleneck_out.0.weight', 'shared_decoder.0.weight',
             'shared_decoder.1.weight', 'decoders.nat.0.weight', 'decoders.syn.8.bias', 'regressor.0.weight',
             'regressor.4.weight']
    h = 1e-5
    picker = np.random.default_rng(2)
    checked = 0
    for name in names:
        p = params[name]
        grad = p.grad.detach().reshape(-1).clone()
        for i in picker.choice(grad.numel(), size=min(2, grad.numel()), replace=False).tolist():
            flat = p.data.view(-1)
            original = float(flat[i])
            with torch.no_grad():
                flat[i] = original + h
                plus = float(_loss())
                flat[i] = original - h
                minus = float(_loss())
                flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            analytic = float(grad[i])
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8, name
            checked += 1
    assert checked >= 20


def test_presets():
    config = apply_preset(TrainConfig(), 'bf')
    assert config.weights.rec_kind == LOSS_BCE
    assert config.optimizer.kind == OPT_RADAM
    assert config.batch_size == 64
    assert apply_preset(TrainConfig(), 'pc').optimizer.kind == OPT_ADAM
    with pytest.raises(ConfigError):
        apply_preset(TrainConfig(), 'fluorescence')


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=5, regressor_start_epoch=6).validate()
    with pytest.raises(ConfigError):
        TrainConfig(validation_split=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(optimizer=OptimizerConfig(kind='sgd')).validate()
    config = TrainConfig.from_dict({'batch_size': 8, 'weights': {'w_rec': 5.0}})
    assert config.batch_size == 8 and config.weights.w_rec == 5.0


def test_training_is_reproducible(small_model_config, syn_dir, nat_dir):
    nat, syn = load_dataset(nat_dir), load_dataset(syn_dir)
    first = train(small_model_config, _tiny_train_config(), nat, syn, verbose=False)
    second = train(small_model_config, _tiny_train_config(), nat, syn, verbose=False)
    assert first.epochs_run == 3
    assert len(first.loss_log) == 3
    pd.testing.assert_frame_equal(first.loss_log, second.loss_log)
    pd.testing.assert_frame_equal(first.validation_log, second.validation_log)
    assert np.isfinite(first.loss_log['total']).all()


def test_regressor_is_frozen_before_its_start(small_model_config, syn_dir, nat_dir):
    nat, syn = load_dataset(nat_dir), load_dataset(syn_dir)
    config = _tiny_train_config(max_epochs=2, regressor_start_epoch=2)
    result = train(small_model_config, config, nat, syn, verbose=False)
    initial = init_params(small_model_config, derive_seed(3, 0))
    for trained, start in zip(result.model.regressor.parameters(), initial.regressor.parameters()):
        assert torch.equal(trained, start)
    assert (result.loss_log['regr_nat'] == 0).all() and (result.loss_log['regr_syn'] == 0).all()

    started = train(small_model_config, _tiny_train_config(max_epochs=2, regressor_start_epoch=1), nat, syn,
                    verbose=False)
    assert not torch.equal(started.model.regressor[0].weight, initial.regressor[0].weight)


def test_natural_only_training(small_model_config, nat_dir):
    result = train(small_model_config, _tiny_train_config(max_epochs=2), load_dataset(nat_dir), None, verbose=False)
    assert (result.loss_log['rec_syn'] == 0).all()
    assert (result.loss_log['rec_nat'] > 0).all()


def test_training_rejects_bad_datasets(small_model_config, syn_dir, nat_dir):
    nat, syn = load_dataset(nat_dir), load_dataset(syn_dir)
    with pytest.raises(DatasetError):
        train(small_model_config, _tiny_train_config(), syn, None, verbose=False)
    with pytest.raises(DatasetError):
        train(small_model_config, _tiny_train_config(), nat, syn.hide_labels(2, 0), verbose=False)


def test_run_directory_and_resume(small_model_config, syn_dir, nat_dir, tmp_path):
    nat, syn = load_dataset(nat_dir), load_dataset(syn_dir)
    run_dir = str(tmp_path / 'run')
    result = train(small_model_config, _tiny_train_config(max_epochs=2), nat, syn, run_dir=run_dir, verbose=False)
    for filename in [LOSS_LOG_FILENAME, VALIDATION_LOG_FILENAME, BEST_CHECKPOINT_FILENAME, LAST_CHECKPOINT_FILENAME,
                     LOSS_GRAPH_FILENAME, TRAIN_CONFIG_FILENAME]:
        assert os.path.exists(os.path.join(run_dir, filename))
    assert result.best_epoch in [0, 1]

    _, extra = load_checkpoint(os.path.join(run_dir, LAST_CHECKPOINT_FILENAME))
    assert extra['epoch'] == 1

    resumed = train(small_model_config, _tiny_train_config(max_epochs=3), nat, syn, run_dir=run_dir,
                    resume_from=os.path.join(run_dir, LAST_CHECKPOINT_FILENAME), verbose=False)
    assert resumed.epochs_run == 1
    assert resumed.loss_log['epoch'].tolist() == [2]
    assert pd.read_csv(os.path.join(run_dir, LOSS_LOG_FILENAME))['epoch'].tolist() == [0, 1, 2]
