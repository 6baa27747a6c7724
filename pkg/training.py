import math
import os
import threading
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple
import numpy as np
import pandas as pd
import torch
from torch.optim.optimizer import Optimizer
from tqdm import tqdm
from constants import *
from generic import ConfigError, DatasetError, DivergenceError, ShapeError, dataclass_from_dict, dataclass_to_dict, \
    derive_seed, make_rng
from file_output import write_json
from dataio import AugmentConfig, Batch, cycle_batches, make_batches
from twinvae import init_params, load_checkpoint, save_checkpoint, predict_counts, encode_state, decode_state

LOSS_WEIGHT_KEYS = ['w_rec', 'w_regr', 'w_kld', 'rec_kind']

# dropout draws from the process-wide torch generator: one training body at a time may own it
_TORCH_RNG_LOCK = threading.Lock()


@dataclass
class LossWeights:
    w_rec: float = LOSS_W_REC
    w_regr: float = LOSS_W_REGR
    w_kld: float = LOSS_W_KLD
    rec_kind: str = LOSS_MSE
    bce_decay_rate: float = BCE_DECAY_RATE
    bce_decay_mode: str = BCE_DECAY_MULTIPLICATIVE
    # per-domain overrides of w_rec, w_regr, w_kld and rec_kind, e.g. {"nat": {"w_rec": 50}}
    overrides: Dict[str, Dict] = field(default_factory=dict)

    def for_domain(self, domain):
        values = {'w_rec': self.w_rec, 'w_regr': self.w_regr, 'w_kld': self.w_kld, 'rec_kind': self.rec_kind}
        values.update(self.overrides.get(domain, {}))
        return values

    def validate(self):
        for domain, override in self.overrides.items():
            if domain not in DOMAINS:
                raise ConfigError("loss weight override for unknown domain '%s'" % domain)
            unknown = sorted(set(override) - set(LOSS_WEIGHT_KEYS))
            if unknown:
                raise ConfigError('unknown loss weight override key(s): %s' % ', '.join(unknown))
        for domain in DOMAINS:
            values = self.for_domain(domain)
            for key in ['w_rec', 'w_regr', 'w_kld']:
                if values[key] < 0:
                    raise ConfigError('%s must be >= 0 (domain %s)' % (key, domain))
            if values['rec_kind'] not in [LOSS_MSE, LOSS_BCE]:
                raise ConfigError("rec_kind must be '%s' or '%s'" % (LOSS_MSE, LOSS_BCE))
        if not 0.0 <= self.bce_decay_rate < 1.0:
            raise ConfigError('bce_decay_rate must be in [0, 1)')
        if self.bce_decay_mode not in [BCE_DECAY_MULTIPLICATIVE, BCE_DECAY_ADDITIVE]:
            raise ConfigError("bce_decay_mode must be '%s' or '%s'" % (BCE_DECAY_MULTIPLICATIVE, BCE_DECAY_ADDITIVE))
        return self

    def to_dict(self):
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return dataclass_from_dict(cls, data, 'weights')


@dataclass
class OptimizerConfig:
    kind: str = OPT_ADAM
    learning_rate: float = OPT_LEARNING_RATE
    betas: Tuple[float, float] = OPT_BETAS
    epsilon: float = OPT_EPSILON
    weight_decay: float = OPT_WEIGHT_DECAY
    weight_decay_mode: str = WEIGHT_DECAY_EPOCH

    def validate(self):
        if self.kind not in [OPT_ADAM, OPT_RADAM]:
            raise ConfigError("optimizer kind must be '%s' or '%s'" % (OPT_ADAM, OPT_RADAM))
        if self.learning_rate <= 0:
            raise ConfigError('learning_rate must be > 0')
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError('betas must be two values in [0, 1)')
        if self.epsilon <= 0:
            raise ConfigError('epsilon must be > 0')
        if not 0.0 <= self.weight_decay < 1.0:
            raise ConfigError('weight_decay must be in [0, 1)')
        if self.weight_decay_mode not in [WEIGHT_DECAY_EPOCH, WEIGHT_DECAY_STEP]:
            raise ConfigError("weight_decay_mode must be '%s' or '%s'" % (WEIGHT_DECAY_EPOCH, WEIGHT_DECAY_STEP))
        return self

    def to_dict(self):
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return dataclass_from_dict(cls, data, 'optimizer')


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = TRAIN_MAX_EPOCHS
    regressor_start_epoch: int = TRAIN_REGRESSOR_START
    patience: int = TRAIN_PATIENCE
    min_improvement: float = TRAIN_MIN_IMPROVEMENT
    validation_split: float = TRAIN_VALIDATION_SPLIT
    steps_per_epoch: Optional[int] = None
    checkpoint_every: int = 50
    augment_synthetic: bool = True
    augment_natural: bool = True
    seed: Optional[int] = None
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError('batch_size must be >= 1')
        if self.max_epochs < 1:
            raise ConfigError('max_epochs must be >= 1')
        if not 0 <= self.regressor_start_epoch <= self.max_epochs:
            raise ConfigError('regressor_start_epoch must be in [0, max_epochs]')
        if self.patience < 1:
            raise ConfigError('patience must be >= 1')
        if self.min_improvement < 0:
            raise ConfigError('min_improvement must be >= 0')
        if not 0.0 <= self.validation_split < 1.0:
            raise ConfigError('validation_split must be in [0, 1)')
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError('steps_per_epoch must be >= 1')
        if self.checkpoint_every < 1:
            raise ConfigError('checkpoint_every must be >= 1')
        self.weights.validate()
        self.optimizer.validate()
        self.augmentation.validate()
        return self

    def to_dict(self):
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        weights = LossWeights.from_dict(data.pop('weights', None))
        optimizer = OptimizerConfig.from_dict(data.pop('optimizer', None))
        augmentation = dataclass_from_dict(AugmentConfig, data.pop('augmentation', None), 'augmentation')
        config = dataclass_from_dict(cls, data, 'train')
        config.weights, config.optimizer, config.augmentation = weights, optimizer, augmentation
        return config


def apply_preset(config, name):
    """
    Apply one of the published regimes: 'pc' (MSE + Adam, batch 128) or 'bf' (BCE + RAdam, batch 64).
    :param config: TrainConfig, changed in place
    :param name: preset name
    :return: the config
    """
    if name not in PRESETS:
        raise ConfigError("Unknown preset '%s', choose one of: %s" % (name, ', '.join(sorted(PRESETS))))
    preset = PRESETS[name]
    config.weights.rec_kind = preset['rec_kind']
    config.optimizer.kind = preset['optimizer']
    config.batch_size = preset['batch_size']
    return config


@dataclass
class LossReport:
    total: torch.Tensor
    rec_nat: torch.Tensor
    rec_syn: torch.Tensor
    regr_nat: torch.Tensor
    regr_syn: torch.Tensor
    kld_nat: torch.Tensor
    kld_syn: torch.Tensor
    epoch: int
    w_rec_eff: float

    COMPONENTS = ['rec_nat', 'rec_syn', 'regr_nat', 'regr_syn', 'kld_nat', 'kld_syn']

    def as_dict(self):
        values = {'total': float(self.total)}
        for name in self.COMPONENTS:
            values[name] = float(getattr(self, name))
        values['epoch'] = self.epoch
        values['w_rec_eff'] = self.w_rec_eff
        return values


def mse_loss(x, recon):
    if x.shape != recon.shape:
        raise ShapeError('mse_loss got shapes %s and %s' % (tuple(x.shape), tuple(recon.shape)))
    return ((x - recon) ** 2).mean()


def bce_loss(x, recon):
    if x.shape != recon.shape:
        raise ShapeError('bce_loss got shapes %s and %s' % (tuple(x.shape), tuple(recon.shape)))
    r = recon.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(x * torch.log(r) + (1.0 - x) * torch.log(1.0 - r)).mean()


def kld_loss(mu, logvar):
    """
    KL divergence to the standard normal, summed over latent dimensions and averaged over the batch.
    """
    if mu.dim() == 1:
        mu, logvar = mu.unsqueeze(0), logvar.unsqueeze(0)
    return (-0.5 * (1.0 + logvar - mu ** 2 - torch.exp(logvar)).sum(dim=-1)).mean()


def regr_loss(estimate, label, labeled=None):
    """
    Squared count error of the labeled samples averaged over the whole batch, so an unlabeled sample weighs in with
    a regression weight of 0. Exactly 0 when no sample is labeled.
    :param estimate: raw estimates, tensor of shape (n,)
    :param label: labels, tensor of shape (n,), NaN where unknown
    :param labeled: optional boolean mask, default: label is not NaN
    :return: scalar tensor
    """
    estimate = torch.as_tensor(estimate)
    label = torch.as_tensor(label, dtype=estimate.dtype, device=estimate.device)
    if labeled is None:
        labeled = ~torch.isnan(label)
    else:
        labeled = torch.as_tensor(labeled, dtype=torch.bool, device=estimate.device)
    if not bool(labeled.any()):
        return torch.zeros((), dtype=estimate.dtype, device=estimate.device)
    return ((estimate[labeled] - label[labeled]) ** 2).sum() / estimate.numel()


def effective_rec_weight(weights, domain, epoch):
    """
    Reconstruction weight of a domain at an epoch. A BCE reconstruction weight decays with bce_decay_rate per epoch.
    """
    values = weights.for_domain(domain)
    if values['rec_kind'] != LOSS_BCE:
        return float(values['w_rec'])
    if weights.bce_decay_mode == BCE_DECAY_ADDITIVE:
        return float(values['w_rec']) * max(0.0, 1.0 - weights.bce_decay_rate * epoch)
    return float(values['w_rec']) * (1.0 - weights.bce_decay_rate) ** epoch


def combine_losses(components, weights, epoch, regress=True):
    """
    Weighted twin loss from its components. Missing components count as 0.
    :param components: dict with any of rec_nat, rec_syn, regr_nat, regr_syn, kld_nat, kld_syn
    :param weights: LossWeights
    :param epoch: epoch for the BCE schedule
    :param regress: include the regression terms
    :return: total (same type as the components)
    """
    total = 0.0
    for domain in DOMAINS:
        values = weights.for_domain(domain)
        total = total + effective_rec_weight(weights, domain, epoch) * components.get('rec_' + domain, 0.0)
        if regress:
            total = total + values['w_regr'] * components.get('regr_' + domain, 0.0)
        total = total + values['w_kld'] * components.get('kld_' + domain, 0.0)
    return total


def _domain_components(output, images, labels, weights, domain, regress):
    zero = torch.zeros((), dtype=output.reconstruction.dtype)
    kind = weights.for_domain(domain)['rec_kind']
    rec = bce_loss(images, output.reconstruction) if kind == LOSS_BCE else mse_loss(images, output.reconstruction)
    regr = regr_loss(output.count_raw, labels) if regress else zero
    return rec, regr, kld_loss(output.latent.mu, output.latent.logvar)


def _batch_tensors(batch, like):
    images = torch.as_tensor(np.asarray(batch.images), dtype=like.dtype).reshape(like.shape)
    labels, _ = batch.label_array()
    return images, torch.as_tensor(labels, dtype=like.dtype)


def twin_loss(out_nat, out_syn, batch_nat, batch_syn, weights, epoch, regress=True):
    """
    Twin loss over both domains. Either domain may be absent (None).
    :param out_nat: ForwardOutput of the natural batch or None
    :param out_syn: ForwardOutput of the synthetic batch or None
    :param batch_nat: dataio Batch of the natural domain or None
    :param batch_syn: dataio Batch of the synthetic domain or None
    :param weights: LossWeights
    :param epoch: current epoch
    :param regress: include the regression terms
    :return: LossReport
    """
    components = {}
    dtype = None
    for domain, output, batch in [(DOMAIN_NAT, out_nat, batch_nat), (DOMAIN_SYN, out_syn, batch_syn)]:
        if output is None or batch is None:
            continue
        dtype = output.reconstruction.dtype
        images, labels = _batch_tensors(batch, output.reconstruction)
        rec, regr, kld = _domain_components(output, images, labels, weights, domain, regress)
        components['rec_' + domain] = rec
        components['regr_' + domain] = regr
        components['kld_' + domain] = kld
    zero = torch.zeros((), dtype=dtype or torch.float32)
    total = combine_losses(components, weights, epoch, regress)
    if not torch.is_tensor(total):
        total = zero + total
    return LossReport(total=total,
                      epoch=epoch,
                      w_rec_eff=effective_rec_weight(weights, DOMAIN_NAT, epoch),
                      **{name: components.get(name, zero) for name in LossReport.COMPONENTS})


def radam_rho(step, beta2):
    """
    Length of the approximated simple moving average of RAdam at a step.
    """
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    return rho_inf - 2.0 * step * beta2 ** step / (1.0 - beta2 ** step)


class _DecoupledDecayOptimizer(Optimizer):

    def __init__(self, params, lr, betas, eps, weight_decay, decay_mode):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, decay_mode=decay_mode)
        super().__init__(params, defaults)

    @torch.no_grad()
    def decay_weights(self):
        """
        Decoupled weight decay p <- p * (1 - weight_decay) on every trainable parameter.
        """
        for group in self.param_groups:
            if group['weight_decay'] == 0:
                continue
            for p in group['params']:
                if p.requires_grad:
                    p.mul_(1.0 - group['weight_decay'])

    def _moments(self, p, group):
        g = p.grad
        if not torch.isfinite(g).all():
            raise DivergenceError('non-finite gradient for a parameter of shape %s' % (tuple(p.shape),))
        state = self.state[p]
        # lazy state initialization
        if len(state) == 0:
            state['step'] = 0
            state['m'] = torch.zeros_like(p, memory_format=torch.preserve_format)
            state['v'] = torch.zeros_like(p, memory_format=torch.preserve_format)
        b1, b2 = group['betas']
        state['step'] += 1
        state['m'].mul_(b1).add_(g, alpha=1.0 - b1)
        state['v'].mul_(b2).addcmul_(g, g, value=1.0 - b2)
        return state

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group['params']:
                if p.grad is None or not p.requires_grad:
                    continue
                state = self._moments(p, group)
                p.sub_(self._update(state, group))
                if group['decay_mode'] == WEIGHT_DECAY_STEP and group['weight_decay'] != 0:
                    p.mul_(1.0 - group['weight_decay'])
        return loss

    def _update(self, state, group):
        raise NotImplementedError


class Adam(_DecoupledDecayOptimizer):
    """
    Adam with bias-corrected moments and decoupled weight decay.
    """

    def __init__(self, params, lr=OPT_LEARNING_RATE, betas=OPT_BETAS, eps=OPT_EPSILON, weight_decay=0.0,
                 decay_mode=WEIGHT_DECAY_EPOCH):
        super().__init__(params, lr, betas, eps, weight_decay, decay_mode)

    def _update(self, state, group):
        b1, b2 = group['betas']
        t = state['step']
        m_hat = state['m'] / (1.0 - b1 ** t)
        v_hat = state['v'] / (1.0 - b2 ** t)
        return group['lr'] * m_hat / (torch.sqrt(v_hat) + group['eps'])


class RAdam(_DecoupledDecayOptimizer):
    """
    Rectified Adam: plain momentum steps while the variance of the adaptive learning rate is intractable
    (rho_t <= 4), variance-rectified Adam steps afterwards.
    """

    def __init__(self, params, lr=OPT_LEARNING_RATE, betas=OPT_BETAS, eps=OPT_EPSILON, weight_decay=0.0,
                 decay_mode=WEIGHT_DECAY_EPOCH):
        super().__init__(params, lr, betas, eps, weight_decay, decay_mode)

    def _update(self, state, group):
        b1, b2 = group['betas']
        t = state['step']
        m_hat = state['m'] / (1.0 - b1 ** t)
        rho_t = radam_rho(t, b2)
        if rho_t <= RADAM_RHO_THRESHOLD:
            return group['lr'] * m_hat
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        rect = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
        v_hat = state['v'] / (1.0 - b2 ** t)
        return group['lr'] * rect * m_hat / (torch.sqrt(v_hat) + group['eps'])


def make_optimizer(params, config):
    """
    :param params: iterable of parameters
    :param config: OptimizerConfig
    :return: Adam or RAdam
    """
    cls = RAdam if config.kind == OPT_RADAM else Adam
    return cls(params, lr=config.learning_rate, betas=tuple(config.betas), eps=config.epsilon,
               weight_decay=config.weight_decay, decay_mode=config.weight_decay_mode)


def optimizer_step(optimizer, epoch_end=False):
    """
    One optimizer update from the gradients stored on the parameters; at the end of an epoch the per-epoch weight
    decay is applied as well.
    """
    optimizer.step()
    if epoch_end and optimizer.defaults['decay_mode'] == WEIGHT_DECAY_EPOCH:
        optimizer.decay_weights()


def set_regressor_trainable(model, trainable):
    for p in model.regressor.parameters():
        p.requires_grad_(trainable)


@dataclass
class TrainResult:
    model: object
    best_epoch: Optional[int]
    best_val_total: Optional[float]
    epochs_run: int
    stopped_early: bool
    loss_log: pd.DataFrame
    validation_log: pd.DataFrame
    run_dir: Optional[str] = None


def _append_csv(filename, row, columns):
    pd.DataFrame([row], columns=columns).to_csv(filename, mode='a', header=not os.path.exists(filename), index=False,
                                                lineterminator='\n')


def _val_mae(model, manifest, domain):
    if manifest is None:
        return float('nan')
    labeled = manifest.labeled()
    if len(labeled) == 0:
        return float('nan')
    estimates = predict_counts(model, labeled.image_array(), domain)
    return float(np.mean(np.abs(estimates - labeled.labels())))


def _val_total(model, val_nat, val_syn, weights, epoch, regress, batch_size):
    """
    Evaluation mode twin loss over the validation sets, as a sample-weighted mean over batches.
    """
    was_training = model.training
    model.eval()
    totals, count = 0.0, 0
    try:
        with torch.no_grad():
            for domain, manifest in [(DOMAIN_NAT, val_nat), (DOMAIN_SYN, val_syn)]:
                if manifest is None or len(manifest) == 0:
                    continue
                for start in range(0, len(manifest), batch_size):
                    part = manifest.subset(range(start, min(start + batch_size, len(manifest))))
                    batch = Batch(part.image_array(), [s.label for s in part], domain, [s.id for s in part])
                    output = model(batch.images, domain, regress=regress)
                    args = (output, None, batch, None) if domain == DOMAIN_NAT else (None, output, None, batch)
                    report = twin_loss(*args, weights=weights, epoch=epoch, regress=regress)
                    totals += float(report.total) * batch.size
                    count += batch.size
    finally:
        model.train(was_training)
    return totals / count if count else float('nan')


def _rng_extra(epoch, eps_generator):
    return {'epoch': epoch,
            'torch_rng_state': encode_state(torch.get_rng_state()),
            'eps_rng_state': encode_state(eps_generator.get_state())}


def plot_loss_graph(loss_log, output_filename, quiet=False):
    """
    Offline plotly graph of the loss components per epoch.
    :param loss_log: DataFrame with the loss log columns
    :param output_filename: HTML file
    :return:
    """
    import plotly
    import plotly.graph_objs as go
    colours = {'total': COLOR_TOTAL}
    data = []
    for column in ['total'] + LossReport.COMPONENTS:
        domain_colour = COLOR_NAT if column.endswith('_nat') else COLOR_SYN
        data.append(go.Scatter(x=loss_log['epoch'], y=loss_log[column], name=column, mode='lines',
                               line={'color': colours.get(column, domain_colour),
                                     'dash': 'dot' if column.startswith('kld') else
                                     'dash' if column.startswith('regr') else 'solid'}))
    plotly.offline.plot(
        {'data': data,
         'layout': go.Layout(title='Training loss', xaxis={'title': 'epoch'}, yaxis={'title': 'loss', 'type': 'log'})},
        filename=output_filename, auto_open=False)
    if not quiet:
        print("File written:   " + output_filename)


def train(model_config, train_config, nat, syn=None, run_dir=None, resume_from=None, verbose=True):
    """
    Train a twin VAE on paired batches: every optimization step uses one natural and one synthetic batch and an epoch
    is one pass over the synthetic set (over the natural set when no synthetic set is given); the natural stream
    recycles with reshuffling. The regressor is frozen before regressor_start_epoch. A share of each dataset is held
    out for validation, which drives the best checkpoint and early stopping.
    :param model_config: ModelConfig
    :param train_config: TrainConfig with a resolved seed
    :param nat: natural DatasetManifest, labels optional
    :param syn: labeled synthetic DatasetManifest or None for natural-only training
    :param run_dir: directory for logs and checkpoints, None keeps everything in memory
    :param resume_from: optional checkpoint whose weights, epoch and random state are restored
    :param verbose: show a progress bar and print written files
    :return: TrainResult
    """
    train_config.validate()
    model_config.validate()
    if nat is None or len(nat) == 0:
        raise DatasetError('training needs a non-empty natural dataset')
    if nat.domain != DOMAIN_NAT:
        raise DatasetError("natural dataset has domain '%s'" % nat.domain)
    if syn is not None:
        if len(syn) == 0:
            raise DatasetError('the synthetic dataset is empty')
        if syn.domain != DOMAIN_SYN:
            raise DatasetError("synthetic dataset has domain '%s'" % syn.domain)
        if len(syn.labeled()) != len(syn):
            raise DatasetError('every synthetic sample must be labeled')

    seed = train_config.seed if train_config.seed is not None else 0
    weights = train_config.weights
    nat_train, nat_val = nat.split(train_config.validation_split, derive_seed(seed, 1))
    syn_train, syn_val = syn.split(train_config.validation_split, derive_seed(seed, 2)) if syn is not None \
        else (None, None)
    aug = train_config.augmentation

    loss_log_file = val_log_file = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        loss_log_file = os.path.join(run_dir, LOSS_LOG_FILENAME)
        val_log_file = os.path.join(run_dir, VALIDATION_LOG_FILENAME)
        config_dump = {'model': model_config.to_dict(), 'train': train_config.to_dict()}
        write_json(os.path.join(run_dir, TRAIN_CONFIG_FILENAME), config_dump, quiet=not verbose)
        if resume_from is None:
            for filename in [loss_log_file, val_log_file]:
                if os.path.exists(filename):
                    os.remove(filename)

    loss_rows, val_rows = [], []
    best_val, best_epoch, since_best, stopped_early = None, None, 0, False
    tracking_start = min(train_config.regressor_start_epoch, train_config.max_epochs - 1)

    with _TORCH_RNG_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, 3) % (2 ** 63))
        eps_generator = torch.Generator().manual_seed(derive_seed(seed, 4) % (2 ** 63))
        start_epoch = 0
        if resume_from is not None:
            model, extra = load_checkpoint(resume_from, model_config)
            start_epoch = int(extra.get('epoch', -1)) + 1
            if 'torch_rng_state' in extra:
                torch.set_rng_state(decode_state(extra['torch_rng_state']))
                eps_generator.set_state(decode_state(extra['eps_rng_state']))
            best_val = extra.get('best_val_total')
            best_epoch = extra.get('best_epoch')
        else:
            model = init_params(model_config, derive_seed(seed, 0))
        optimizer = make_optimizer(model.parameters(), train_config.optimizer)

        epochs = tqdm(range(start_epoch, train_config.max_epochs), desc='Training', disable=not verbose)
        epoch = start_epoch - 1
        for epoch in epochs:
            regress = epoch >= train_config.regressor_start_epoch
            set_regressor_trainable(model, regress)
            model.train()

            primary, primary_domain = (syn_train, DOMAIN_SYN) if syn_train is not None else (nat_train, DOMAIN_NAT)
            primary_batches = make_batches(primary, train_config.batch_size, make_rng(seed, 10, epoch),
                                           aug if (train_config.augment_synthetic if primary_domain == DOMAIN_SYN
                                                   else train_config.augment_natural) else None)
            nat_stream = cycle_batches(nat_train, train_config.batch_size, make_rng(seed, 11, epoch),
                                       aug if train_config.augment_natural else None) \
                if primary_domain == DOMAIN_SYN else None

            sums = dict.fromkeys(['total'] + LossReport.COMPONENTS, 0.0)
            steps = 0
            for batch_primary in primary_batches:
                batch_nat = next(nat_stream) if nat_stream is not None else batch_primary
                batch_syn = batch_primary if primary_domain == DOMAIN_SYN else None

                optimizer.zero_grad(set_to_none=True)
                out_nat = model(batch_nat.images, DOMAIN_NAT, generator=eps_generator, regress=regress)
                out_syn = model(batch_syn.images, DOMAIN_SYN, generator=eps_generator, regress=regress) \
                    if batch_syn is not None else None
                report = twin_loss(out_nat, out_syn, batch_nat, batch_syn, weights, epoch, regress)
                if not torch.isfinite(report.total):
                    raise DivergenceError('loss became non-finite at epoch %d' % epoch, report.as_dict())
                report.total.backward()
                optimizer_step(optimizer)

                for key in sums:
                    sums[key] += float(getattr(report, key))
                steps += 1
                if train_config.steps_per_epoch is not None and steps >= train_config.steps_per_epoch:
                    break

            if train_config.optimizer.weight_decay_mode == WEIGHT_DECAY_EPOCH:
                optimizer.decay_weights()

            row = {'epoch': epoch}
            row.update({key: value / steps for key, value in sums.items()})
            row['lr'] = optimizer.param_groups[0]['lr']
            row['w_rec_eff'] = effective_rec_weight(weights, DOMAIN_NAT, epoch)
            loss_rows.append(row)

            val_total = _val_total(model, nat_val, syn_val, weights, epoch, regress, train_config.batch_size)
            val_row = {'epoch': epoch, 'val_total': val_total,
                       'val_mae_nat': _val_mae(model, nat_val, DOMAIN_NAT),
                       'val_mae_syn': _val_mae(model, syn_val, DOMAIN_SYN)}
            val_rows.append(val_row)
            if run_dir is not None:
                _append_csv(loss_log_file, row, LOSS_LOG_COLUMNS)
                _append_csv(val_log_file, val_row, VALIDATION_LOG_COLUMNS)
            epochs.set_postfix(loss='%.4g' % row['total'], val='%.4g' % val_total)

            if epoch >= tracking_start and math.isfinite(val_total):
                if best_val is None or val_total < best_val - train_config.min_improvement:
                    best_val, best_epoch, since_best = val_total, epoch, 0
                    if run_dir is not None:
                        extra = _rng_extra(epoch, eps_generator)
                        extra.update({'best_epoch': best_epoch, 'best_val_total': best_val})
                        save_checkpoint(model, os.path.join(run_dir, BEST_CHECKPOINT_FILENAME), extra)
                else:
                    since_best += 1

            last = epoch == train_config.max_epochs - 1 or since_best >= train_config.patience
            if run_dir is not None and (last or (epoch + 1) % train_config.checkpoint_every == 0):
                extra = _rng_extra(epoch, eps_generator)
                extra.update({'best_epoch': best_epoch, 'best_val_total': best_val})
                save_checkpoint(model, os.path.join(run_dir, LAST_CHECKPOINT_FILENAME), extra)
            if since_best >= train_config.patience:
                stopped_early = True
                if verbose:
                    print('Early stopping at epoch %d, best epoch %d (validation loss %.6g)'
                          % (epoch, best_epoch, best_val))
                break

    loss_log = pd.DataFrame(loss_rows, columns=LOSS_LOG_COLUMNS)
    validation_log = pd.DataFrame(val_rows, columns=VALIDATION_LOG_COLUMNS)
    if run_dir is not None:
        if verbose:
            print('File written:   ' + loss_log_file)
            print('File written:   ' + val_log_file)
        if len(loss_log) > 0:
            # a resumed run plots the complete log on disk
            plot_loss_graph(pd.read_csv(loss_log_file), os.path.join(run_dir, LOSS_GRAPH_FILENAME), quiet=not verbose)
    return TrainResult(model=model, best_epoch=best_epoch, best_val_total=best_val, epochs_run=epoch + 1 - start_epoch,
                       stopped_early=stopped_early, loss_log=loss_log, validation_log=validation_log, run_dir=run_dir)
