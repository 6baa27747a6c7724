import struct
import numpy as np
import pytest
import torch
from torch import nn

from constants import *
from generic import CheckpointError, CheckpointShapeError, CheckpointVersionError, ConfigError, ShapeError
from twinvae import ModelConfig, TwinVAE, init_params, load_checkpoint, predict_counts, save_checkpoint


def _images(n, seed=0):
    return np.random.default_rng(seed).random((n, IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32)


@pytest.mark.parametrize('scale', [0.125, 0.5, 1.0])
def test_shape_chains(scale):
    model = TwinVAE(ModelConfig(channel_scale=scale))
    for domain in DOMAINS:
        shapes = model.trace_shapes(domain)
        assert shapes['encoder'] == ENCODER_CHAIN
        assert shapes['decoder'] == DECODER_CHAIN


def test_forward_shapes(small_model_config):
    model = init_params(small_model_config, 0)
    for domain in DOMAINS:
        out = model(_images(3), domain)
        assert tuple(out.reconstruction.shape) == (3, 1, IMAGE_SIZE, IMAGE_SIZE)
        assert float(out.reconstruction.min()) >= 0.0 and float(out.reconstruction.max()) <= 1.0
        assert tuple(out.latent.mu.shape) == (3, small_model_config.latent_dim)
        assert tuple(out.count_raw.shape) == (3,)
        assert bool((out.count_estimate >= 0).all())


def test_decoder_tap(small_model_config):
    small_model_config.regressor_tap = REGRESSOR_TAP_DECODER
    model = init_params(small_model_config, 0)
    assert tuple(model(_images(2), DOMAIN_SYN).count_raw.shape) == (2,)


def test_orthogonal_initialization(small_model_config):
    default_dtype = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        model = init_params(small_model_config, 123)
    finally:
        torch.set_default_dtype(default_dtype)

    checked = 0
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = module.weight.detach().reshape(module.weight.shape[0], -1)
            gram = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
            assert torch.allclose(gram, torch.eye(gram.shape[0], dtype=gram.dtype), atol=1e-5)
            assert bool((module.bias == 0).all())
            checked += 1
    assert checked > 20


def test_initialization_is_seeded(small_model_config):
    a = init_params(small_model_config, 1).state_dict()
    b = init_params(small_model_config, 1).state_dict()
    c = init_params(small_model_config, 2).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a['mu_head.weight'], c['mu_head.weight'])


def test_shared_layers_have_a_single_storage(small_model_config):
    model = TwinVAE(small_model_config)
    names = [name for name, _ in model.named_parameters()]
    assert len([n for n in names if n.startswith('shared_encoder.')]) == 2
    pointers = [p.data_ptr() for p in model.parameters()]
    assert len(pointers) == len(set(pointers))


def test_synthetic_step_moves_the_natural_branch(small_model_config):
    model = init_params(small_model_config, 0)
    nat_image = _images(1, seed=1)
    model.eval()
    with torch.no_grad():
        before = model.encode(nat_image, DOMAIN_NAT).mu.clone()

    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=0.1)
    syn = torch.as_tensor(_images(2, seed=2)).unsqueeze(1)
    out = model(syn, DOMAIN_SYN, eps=torch.zeros(2, small_model_config.latent_dim))
    ((out.reconstruction - syn) ** 2).mean().backward()
    assert all(p.grad is None for p in model.encoders[DOMAIN_NAT].parameters())
    assert all(p.grad is None for p in model.decoders[DOMAIN_NAT].parameters())
    assert model.shared_encoder[0].weight.grad is not None
    optimizer.step()

    model.eval()
    with torch.no_grad():
        after = model.encode(nat_image, DOMAIN_NAT).mu
    assert not torch.allclose(before, after)


def test_reparameterization(small_model_config):
    model = init_params(small_model_config, 0)
    x = _images(2)
    model.eval()
    out = model(x, DOMAIN_NAT)
    assert torch.equal(out.latent.z, out.latent.mu)

    model.train()
    eps = torch.randn(2, small_model_config.latent_dim, generator=torch.Generator().manual_seed(0))
    out = model(x, DOMAIN_NAT, eps=eps)
    expected = out.latent.mu + torch.exp(0.5 * out.latent.logvar) * eps
    assert torch.allclose(out.latent.z, expected)


def test_bad_inputs(small_model_config):
    model = init_params(small_model_config, 0)
    with pytest.raises(ShapeError):
        model.encode(np.zeros((2, 64, 64), dtype=np.float32), DOMAIN_NAT)
    with pytest.raises(ConfigError):
        model.encode(_images(1), 'fluo')
    with pytest.raises(ShapeError):
        model.decode(torch.zeros(1, small_model_config.latent_dim + 1), DOMAIN_SYN)


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(channel_scale=0).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dropout_rate=1.0).validate()
    with pytest.raises(ConfigError):
        ModelConfig(regressor_tap='encoder').validate()
    assert ModelConfig(shared_channels=96).shared_encoder_channels == 96


def test_predict_counts(small_model_config):
    model = init_params(small_model_config, 0)
    counts = predict_counts(model, _images(5), DOMAIN_SYN, batch_size=2)
    assert counts.shape == (5,) and counts.dtype == np.float64
    assert (counts >= 0).all()
    assert model.training
    assert predict_counts(model, _images(0), DOMAIN_SYN).shape == (0,)


def test_checkpoint_round_trip(small_model_config, tmp_path):
    model = init_params(small_model_config, 4)
    path = str(tmp_path / 'model.ckpt')
    save_checkpoint(model, path, extra={'epoch': 7})
    loaded, extra = load_checkpoint(path)
    assert extra == {'epoch': 7}
    assert loaded.config == small_model_config
    state, loaded_state = model.state_dict(), loaded.state_dict()
    assert list(state) == list(loaded_state)
    assert all(torch.equal(state[k], loaded_state[k]) for k in state)
    x = _images(3)
    np.testing.assert_array_equal(predict_counts(model, x, DOMAIN_NAT), predict_counts(loaded, x, DOMAIN_NAT))


def test_checkpoint_keeps_double_precision(small_model_config, tmp_path):
    model = init_params(small_model_config, 4).double()
    path = str(tmp_path / 'model.ckpt')
    save_checkpoint(model, path)
    loaded, _ = load_checkpoint(path)
    assert loaded.dtype == torch.float64
    assert torch.equal(loaded.mu_head.weight, model.mu_head.weight)


def test_checkpoint_errors(small_model_config, tmp_path):
    path = str(tmp_path / 'model.ckpt')
    save_checkpoint(init_params(small_model_config, 0), path)
    with open(path, 'rb') as f:
        data = f.read()

    bad_magic = str(tmp_path / 'magic.ckpt')
    with open(bad_magic, 'wb') as f:
        f.write(b'NOTACKPT' + data[len(CHECKPOINT_MAGIC):])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad_magic)

    bad_version = str(tmp_path / 'version.ckpt')
    with open(bad_version, 'wb') as f:
        f.write(CHECKPOINT_MAGIC + struct.pack('<I', CHECKPOINT_VERSION + 1) + data[len(CHECKPOINT_MAGIC) + 4:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad_version)

    truncated = str(tmp_path / 'truncated.ckpt')
    with open(truncated, 'wb') as f:
        f.write(data[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)

    other = ModelConfig(channel_scale=0.125, latent_dim=16, dropout_rate=0.0)
    with pytest.raises(CheckpointShapeError) as e:
        load_checkpoint(path, other)
    assert e.value.tensor_name == 'mu_head.weight'

    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / 'missing.ckpt'))
