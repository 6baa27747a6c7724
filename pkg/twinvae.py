import base64
import os
import struct
from dataclasses import dataclass
from typing import Optional
import numpy as np
import simplejson
import torch
from torch import nn
from constants import *
from generic import ConfigError, ShapeError, CheckpointError, CheckpointVersionError, CheckpointShapeError, \
    dataclass_from_dict, dataclass_to_dict, dumps_json
from file_output import write_file


@dataclass
class ModelConfig:
    channel_scale: float = 1.0
    latent_dim: int = MODEL_LATENT_DIM
    dropout_rate: float = MODEL_DROPOUT
    leaky_slope: float = MODEL_LEAKY_SLOPE
    shared_channels: Optional[int] = None
    regressor_tap: str = REGRESSOR_TAP_LATENT
    resolution: int = IMAGE_SIZE

    def validate(self):
        if self.channel_scale <= 0:
            raise ConfigError('channel_scale must be > 0')
        if self.latent_dim < 2:
            raise ConfigError('latent_dim must be >= 2')
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError('dropout_rate must be in [0, 1)')
        if self.leaky_slope < 0:
            raise ConfigError('leaky_slope must be >= 0')
        if self.shared_channels is not None and self.shared_channels < 1:
            raise ConfigError('shared_channels must be >= 1')
        if self.regressor_tap not in [REGRESSOR_TAP_LATENT, REGRESSOR_TAP_DECODER]:
            raise ConfigError("regressor_tap must be '%s' or '%s'" % (REGRESSOR_TAP_LATENT, REGRESSOR_TAP_DECODER))
        if self.resolution != IMAGE_SIZE:
            raise ConfigError('resolution is fixed to %d' % IMAGE_SIZE)
        return self

    def scaled(self, channels):
        return max(1, int(round(channels * self.channel_scale)))

    @property
    def encoder_channels(self):
        return [self.scaled(c) for c in MODEL_ENCODER_CHANNELS]

    @property
    def shared_encoder_channels(self):
        return self.shared_channels if self.shared_channels is not None else self.scaled(MODEL_SHARED_CHANNELS)

    @property
    def bottleneck_units(self):
        return self.scaled(MODEL_BOTTLENECK_UNITS)

    @property
    def shared_decoder_channels(self):
        return self.scaled(MODEL_SHARED_DECODER_CHANNELS)

    @property
    def decoder_channels(self):
        return [self.scaled(c) for c in MODEL_DECODER_CHANNELS]

    def to_dict(self):
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return dataclass_from_dict(cls, data, 'model')


@dataclass
class LatentCode:
    mu: torch.Tensor
    logvar: torch.Tensor
    z: Optional[torch.Tensor] = None
    eps: Optional[torch.Tensor] = None


@dataclass
class ForwardOutput:
    reconstruction: torch.Tensor
    latent: LatentCode
    count_raw: torch.Tensor

    @property
    def count_estimate(self):
        """
        Count estimate clamped at 0 from below, for reporting.
        """
        return self.count_raw.clamp(min=0.0)


def _check_domain(domain):
    if domain not in DOMAINS:
        raise ConfigError("domain must be one of %s, got '%s'" % (DOMAINS, domain))


class TwinVAE(nn.Module):
    """
    Two variational autoencoders, one per image domain, which share the last encoder convolution, the bottleneck and
    the first decoder layer. A regressor estimates the cell count from the shared representation.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        slope = config.leaky_slope
        enc = config.encoder_channels
        shared = config.shared_encoder_channels
        hidden = config.bottleneck_units
        dec_shared = config.shared_decoder_channels
        dec = config.decoder_channels

        self.encoders = nn.ModuleDict({d: self._encoder(enc, slope, config.dropout_rate) for d in DOMAINS})
        self.shared_encoder = nn.Sequential(
            nn.Conv2d(enc[-1], shared, MODEL_KERNEL, stride=MODEL_STRIDE, padding=MODEL_PADDING),
            nn.LeakyReLU(slope),
            nn.Dropout(config.dropout_rate))
        flat = shared * ENCODER_CHAIN[-1] * ENCODER_CHAIN[-1]
        self.bottleneck_in = nn.Sequential(nn.Flatten(), nn.Linear(flat, hidden), nn.LeakyReLU(slope),
                                           nn.Dropout(config.dropout_rate))
        self.mu_head = nn.Linear(hidden, config.latent_dim)
        self.logvar_head = nn.Linear(hidden, config.latent_dim)
        self.bottleneck_out = nn.Sequential(nn.Linear(config.latent_dim, hidden), nn.LeakyReLU(slope))
        self.shared_decoder = nn.Sequential(
            nn.ConvTranspose2d(hidden, dec_shared, MODEL_KERNEL, stride=MODEL_STRIDE),
            nn.BatchNorm2d(dec_shared),
            nn.LeakyReLU(slope))
        self.decoders = nn.ModuleDict({d: self._decoder(dec_shared, dec, slope) for d in DOMAINS})

        regressor_in = config.latent_dim if config.regressor_tap == REGRESSOR_TAP_LATENT else dec_shared
        units = MODEL_REGRESSOR_UNITS
        self.regressor = nn.Sequential(nn.Linear(regressor_in, units[0]), nn.Dropout(config.dropout_rate),
                                       nn.Linear(units[0], units[1]), nn.Dropout(config.dropout_rate),
                                       nn.Linear(units[1], 1))

    @staticmethod
    def _encoder(channels, slope, dropout):
        layers = []
        in_channels = 1
        for out_channels in channels:
            layers += [nn.Conv2d(in_channels, out_channels, MODEL_KERNEL, stride=MODEL_STRIDE, padding=MODEL_PADDING),
                       nn.LeakyReLU(slope),
                       nn.Dropout(dropout)]
            in_channels = out_channels
        return nn.Sequential(*layers)

    @staticmethod
    def _decoder(in_channels, channels, slope):
        layers = []
        widths = channels + [1]
        for i, out_channels in enumerate(widths):
            layers.append(nn.ConvTranspose2d(in_channels, out_channels, MODEL_DECODER_KERNELS[i],
                                             stride=MODEL_DECODER_STRIDES[i]))
            layers.append(nn.Sigmoid() if i == len(widths) - 1 else nn.LeakyReLU(slope))
            in_channels = out_channels
        return nn.Sequential(*layers)

    def reset_parameters(self, seed):
        """
        Orthogonal initialization of every convolution and fully connected kernel with zero biases.
        Deterministic in seed and independent of the global torch random state.
        :param seed: initialization seed
        :return: self
        """
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed) % (2 ** 63))
            for module in self.modules():
                if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                    nn.init.orthogonal_(module.weight)
                    if module.bias is not None:
                        nn.init.zeros_(module.bias)
                elif isinstance(module, nn.BatchNorm2d):
                    module.reset_parameters()
        return self

    @property
    def dtype(self):
        return self.mu_head.weight.dtype

    def as_input(self, images):
        """
        Convert a stack of 128x128 images (numpy or torch, with or without channel axis) to the model input tensor.
        :param images: array of shape (n, 128, 128) or (n, 1, 128, 128)
        :return: tensor of shape (n, 1, 128, 128)
        """
        tensor = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
        if tensor.dim() == 2:
            tensor = tensor.unsqueeze(0)
        if tensor.dim() == 3:
            tensor = tensor.unsqueeze(1)
        if tensor.dim() != 4 or tuple(tensor.shape[1:]) != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError('expected images of shape (n, %d, %d), got %s' % (IMAGE_SIZE, IMAGE_SIZE,
                                                                            tuple(tensor.shape)))
        return tensor.to(dtype=self.dtype)

    def encode(self, images, domain):
        _check_domain(domain)
        x = self.as_input(images)
        features = self.shared_encoder(self.encoders[domain](x))
        hidden = self.bottleneck_in(features)
        return LatentCode(mu=self.mu_head(hidden), logvar=self.logvar_head(hidden))

    def reparameterize(self, mu, logvar, generator=None, eps=None):
        """
        z = mu + exp(logvar / 2) * eps with eps drawn from a standard normal. In evaluation mode z = mu.
        :param mu: mean tensor
        :param logvar: log variance tensor
        :param generator: optional torch.Generator for eps
        :param eps: optional explicit noise
        :return: (z, eps)
        """
        if not self.training:
            return mu, torch.zeros_like(mu)
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        return mu + torch.exp(0.5 * logvar) * eps, eps

    def _shared_decoded(self, z):
        if z.shape[-1] != self.config.latent_dim:
            raise ShapeError('expected a latent of size %d, got %d' % (self.config.latent_dim, z.shape[-1]))
        hidden = self.bottleneck_out(z.reshape(-1, self.config.latent_dim))
        return self.shared_decoder(hidden.reshape(hidden.shape[0], -1, 1, 1))

    def decode(self, z, domain):
        _check_domain(domain)
        return self.decoders[domain](self._shared_decoded(torch.as_tensor(z, dtype=self.dtype)))

    def regress(self, z):
        """
        Raw regressor output for the latent z. Tapping the shared decoder uses its globally average pooled feature map.
        :param z: latent tensor of shape (n, latent_dim)
        :return: tensor of shape (n,)
        """
        z = torch.as_tensor(z, dtype=self.dtype)
        if self.config.regressor_tap == REGRESSOR_TAP_DECODER:
            features = self._shared_decoded(z).mean(dim=(2, 3))
        else:
            if z.shape[-1] != self.config.latent_dim:
                raise ShapeError('expected a latent of size %d, got %d' % (self.config.latent_dim, z.shape[-1]))
            features = z.reshape(-1, self.config.latent_dim)
        return self.regressor(features).squeeze(-1)

    def forward(self, images, domain, generator=None, eps=None, regress=True):
        latent = self.encode(images, domain)
        latent.z, latent.eps = self.reparameterize(latent.mu, latent.logvar, generator, eps)
        reconstruction = self.decode(latent.z, domain)
        if regress:
            count_raw = self.regress(latent.z)
        else:
            count_raw = torch.zeros(latent.z.shape[0], dtype=latent.z.dtype, device=latent.z.device)
        return ForwardOutput(reconstruction=reconstruction, latent=latent, count_raw=count_raw)

    def trace_shapes(self, domain=DOMAIN_NAT):
        """
        Spatial sizes of the feature maps along the encoder and the decoder of one domain.
        :param domain: 'nat' or 'syn'
        :return: dict with the 'encoder' and 'decoder' chains
        """
        _check_domain(domain)
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                x = torch.zeros(1, 1, IMAGE_SIZE, IMAGE_SIZE, dtype=self.dtype)
                encoder = [x.shape[-1]]
                for layer in list(self.encoders[domain]) + list(self.shared_encoder):
                    x = layer(x)
                    if isinstance(layer, nn.Conv2d):
                        encoder.append(x.shape[-1])
                z = torch.zeros(1, self.config.latent_dim, dtype=self.dtype)
                y = self.bottleneck_out(z).reshape(1, -1, 1, 1)
                decoder = [y.shape[-1]]
                for layer in list(self.shared_decoder) + list(self.decoders[domain]):
                    y = layer(y)
                    if isinstance(layer, nn.ConvTranspose2d):
                        decoder.append(y.shape[-1])
        finally:
            self.train(was_training)
        return {'encoder': encoder, 'decoder': decoder}


def init_params(config, seed):
    """
    Build a TwinVAE and initialize it orthogonally.
    :param config: ModelConfig
    :param seed: initialization seed
    :return: TwinVAE
    """
    return TwinVAE(config).reset_parameters(seed)


def predict_counts(model, images, domain, batch_size=256):
    """
    Evaluation mode count estimates (z = mu), clamped at 0.
    :param model: TwinVAE
    :param images: array of shape (n, 128, 128)
    :param domain: encoder to use
    :param batch_size: images per forward pass
    :return: float64 numpy array of shape (n,)
    """
    was_training = model.training
    model.eval()
    estimates = []
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                latent = model.encode(images[start:start + batch_size], domain)
                estimates.append(model.regress(latent.mu).clamp(min=0.0).double().cpu().numpy())
    finally:
        model.train(was_training)
    if not estimates:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate(estimates)


def encode_state(state):
    """
    Serialize a torch random state (ByteTensor) for the checkpoint header.
    """
    return base64.b64encode(state.cpu().numpy().tobytes()).decode('ascii')


def decode_state(text):
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())


def _dtype_name(tensor):
    name = str(tensor.dtype).replace('torch.', '')
    if name not in CHECKPOINT_DTYPES:
        raise CheckpointError("cannot store tensors of dtype '%s'" % name)
    return name


def checkpoint_bytes(model, extra=None):
    """
    Serialize a model to the named-tensor container: magic, format version (uint32), header length (uint64), JSON
    header and the raw little-endian tensor data. Offsets in the header are relative to the start of the data.
    :param model: TwinVAE
    :param extra: JSON serializable dict stored in the header (epoch, random states)
    :return: bytes
    """
    tensors, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        dtype = _dtype_name(tensor)
        blob = tensor.detach().cpu().contiguous().numpy().astype(CHECKPOINT_DTYPES[dtype], copy=False).tobytes()
        tensors.append({'name': name, 'shape': list(tensor.shape), 'dtype': dtype, 'offset': offset,
                        'nbytes': len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = dumps_json({'config': model.config.to_dict(), 'tensors': tensors, 'extra': extra or {}}).encode('utf-8')
    return CHECKPOINT_MAGIC + struct.pack('<IQ', CHECKPOINT_VERSION, len(header)) + header + b''.join(blobs)


def save_checkpoint(model, path, extra=None, quiet=True):
    """
    Atomically write a checkpoint file.
    :param model: TwinVAE
    :param path: target file
    :param extra: JSON serializable dict stored in the header
    :param quiet: do not print the 'File written' line
    :return: the path
    """
    return write_file(path, checkpoint_bytes(model, extra), binary=True, quiet=quiet)


def read_checkpoint_header(data, path='<bytes>'):
    prefix = len(CHECKPOINT_MAGIC) + struct.calcsize('<IQ')
    if len(data) < prefix or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointVersionError('%s is not a checkpoint of this format version (bad magic)' % path)
    version, header_len = struct.unpack('<IQ', data[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError('%s has checkpoint format version %d, expected %d' % (path, version,
                                                                                          CHECKPOINT_VERSION))
    if len(data) < prefix + header_len:
        raise CheckpointError('%s is truncated inside the header' % path)
    try:
        header = simplejson.loads(data[prefix:prefix + header_len].decode('utf-8'))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError('%s has an unreadable header: %s' % (path, e))
    return header, prefix + header_len


def load_checkpoint(path, config=None):
    """
    Load a checkpoint. The model is built from `config` when given, else from the configuration in the header.
    :param path: checkpoint file
    :param config: optional ModelConfig the tensors must fit
    :return: (TwinVAE, extra dict)
    """
    if not os.path.exists(path):
        raise CheckpointError('checkpoint does not exist: %s' % path)
    with open(path, 'rb') as f:
        data = f.read()
    header, data_start = read_checkpoint_header(data, path)
    model_config = config if config is not None else ModelConfig.from_dict(header['config'])
    model = TwinVAE(model_config)

    stored = {t['name']: t for t in header['tensors']}
    state = model.state_dict()
    loaded = {}
    for name, expected in state.items():
        if name not in stored:
            raise CheckpointError("%s has no tensor '%s'" % (path, name))
        entry = stored[name]
        if list(entry['shape']) != list(expected.shape):
            raise CheckpointShapeError(name, expected.shape, entry['shape'])
        start = data_start + entry['offset']
        end = start + entry['nbytes']
        if end > len(data):
            raise CheckpointError('%s is truncated inside tensor %s' % (path, name))
        array = np.frombuffer(data[start:end], dtype=CHECKPOINT_DTYPES[entry['dtype']]).reshape(entry['shape'])
        loaded[name] = torch.from_numpy(array.copy())

    # the stored dtype decides the model precision
    dtypes = {stored[n]['dtype'] for n in state if stored[n]['dtype'] in ('float32', 'float64')}
    if dtypes == {'float64'}:
        model = model.double()
    model.load_state_dict(loaded)
    return model, header.get('extra', {})
