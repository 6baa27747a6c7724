import copy
import inspect
import itertools
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional
import numpy as np
import simplejson
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import minimize
from scipy.stats import norm, qmc
from tqdm import tqdm
from constants import *
from generic import ConfigError, GPFitError, SearchError, make_rng
from file_output import append_json_line, write_json


@dataclass
class Dimension:
    name: str
    low: float
    high: float
    scale: str = SCALE_LINEAR
    integer: bool = False

    def validate(self):
        if not self.low < self.high:
            raise ConfigError("dimension '%s' needs low < high" % self.name)
        if self.scale not in [SCALE_LOG, SCALE_LINEAR]:
            raise ConfigError("dimension '%s' has unknown scale '%s'" % (self.name, self.scale))
        if self.scale == SCALE_LOG and self.low <= 0:
            raise ConfigError("log-scaled dimension '%s' needs low > 0" % self.name)
        return self

    def _bounds(self):
        if self.scale == SCALE_LOG:
            return math.log(self.low), math.log(self.high)
        return self.low, self.high

    def to_unit(self, value):
        low, high = self._bounds()
        v = math.log(value) if self.scale == SCALE_LOG else value
        return (v - low) / (high - low)

    def from_unit(self, u):
        low, high = self._bounds()
        v = low + float(np.clip(u, 0.0, 1.0)) * (high - low)
        value = math.exp(v) if self.scale == SCALE_LOG else v
        if self.integer:
            value = int(min(max(round(value), math.ceil(self.low)), math.floor(self.high)))
        else:
            value = min(max(value, self.low), self.high)
        return value


@dataclass
class SearchSpace:
    dimensions: List[Dimension] = field(
        default_factory=lambda: [Dimension(**d) for d in HPO_DEFAULT_SPACE])

    @property
    def dim(self):
        return len(self.dimensions)

    @property
    def names(self):
        return [d.name for d in self.dimensions]

    def validate(self):
        if not self.dimensions:
            raise ConfigError('the search space has no dimensions')
        if len(set(self.names)) != len(self.names):
            raise ConfigError('the search space has duplicate dimension names')
        for d in self.dimensions:
            d.validate()
        return self

    def to_config(self, point):
        """
        Map a normalized point to raw hyperparameter values, integer dimensions rounded.
        :param point: vector in [0, 1]^d
        :return: dict name -> value
        """
        return {d.name: d.from_unit(u) for d, u in zip(self.dimensions, point)}

    def to_point(self, config):
        return np.array([d.to_unit(config[d.name]) for d in self.dimensions], dtype=np.float64)

    def snap(self, point):
        """
        Round the integer dimensions of a normalized point.
        """
        return self.to_point(self.to_config(point))

    def to_dict(self):
        return {'dimensions': [{'name': d.name, 'low': d.low, 'high': d.high, 'scale': d.scale, 'integer': d.integer}
                               for d in self.dimensions]}

    @classmethod
    def from_dict(cls, data):
        if data is None:
            return cls()
        if set(data) - {'dimensions'}:
            raise ConfigError("Unknown key(s) in section 'search': %s" % ', '.join(sorted(set(data) - {'dimensions'})))
        try:
            return cls([Dimension(**d) for d in data.get('dimensions', [])])
        except TypeError as e:
            raise ConfigError("Invalid search dimension: %s" % e)


class GPModel:
    """
    Gaussian process with a squared-exponential kernel with one length scale per dimension. Targets are standardized
    internally; signal_variance is reported in the units of the targets.
    """

    def __init__(self, points, values, length_scales, signal, noise):
        self.points = np.asarray(points, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        self.y_mean = float(values.mean())
        std = float(values.std())
        self.y_std = std if std > 1e-12 else 1.0
        self.targets = (values - self.y_mean) / self.y_std
        self.length_scales = np.asarray(length_scales, dtype=np.float64)
        self.signal = float(signal)
        self.noise = float(noise)
        self.factor = None
        self.alpha = None

    @property
    def signal_variance(self):
        return self.signal * self.y_std ** 2

    @property
    def noise_variance(self):
        return self.noise * self.y_std ** 2

    def kernel(self, a, b):
        diff = (a[:, None, :] - b[None, :, :]) / self.length_scales
        return self.signal * np.exp(-0.5 * np.sum(diff ** 2, axis=-1))

    def factorize(self):
        """
        Cholesky factorization of the covariance, escalating the jitter tenfold from the noise floor until the matrix
        is positive definite.
        """
        k = self.kernel(self.points, self.points)
        jitter = max(self.noise, GP_JITTER_FLOOR)
        while jitter <= GP_JITTER_MAX:
            try:
                self.factor = cho_factor(k + jitter * np.eye(len(k)), lower=True)
                self.noise = jitter
                self.alpha = cho_solve(self.factor, self.targets)
                return self
            except LinAlgError:
                jitter *= 10.0
        raise GPFitError('covariance matrix is not positive definite even with a jitter of %g' % GP_JITTER_MAX)

    def log_marginal_likelihood(self):
        lower = self.factor[0]
        return float(-0.5 * self.targets @ self.alpha - np.sum(np.log(np.diag(lower)))
                     - 0.5 * len(self.targets) * math.log(2 * math.pi))


def _negative_lml(theta, points, values, noise):
    d = points.shape[1]
    model = GPModel(points, values, np.exp(theta[:d]), math.exp(theta[d]), noise)
    try:
        model.factorize()
    except GPFitError:
        return 1e25
    return -model.log_marginal_likelihood()


def gp_fit(points, values, length_scales=None, signal=None, noise=GP_JITTER_FLOOR, restarts=GP_RESTARTS, seed=0):
    """
    Fit a Gaussian process. Length scales and the (standardized) signal variance maximize the log marginal likelihood
    by a multi-start Nelder-Mead search unless both are given.
    :param points: array (n, d) of normalized points
    :param values: array (n,) of finite targets
    :param length_scales: fixed length scales, scalar or per dimension
    :param signal: fixed standardized signal variance
    :param noise: noise variance, also the jitter floor
    :param restarts: number of starting points of the likelihood search
    :param seed: seed of the random starting points
    :return: GPModel
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(values) < 1 or len(points) != len(values):
        raise GPFitError('gp_fit needs at least one point and one value per point')
    if not np.all(np.isfinite(points)) or not np.all(np.isfinite(values)):
        raise GPFitError('gp_fit needs finite points and values')
    d = points.shape[1]

    if length_scales is not None and signal is not None:
        return GPModel(points, values, np.broadcast_to(length_scales, (d,)), signal, noise).factorize()

    theta0 = np.array([math.log(0.3)] * d + [0.0])
    if len(values) == 1:
        return GPModel(points, values, np.exp(theta0[:d]), 1.0, noise).factorize()

    bounds = [GP_LOG_LENGTH_BOUNDS] * d + [GP_LOG_SIGNAL_BOUNDS]
    rng = np.random.default_rng(seed)
    starts = [theta0] + [np.array([rng.uniform(-3.0, 1.0) for _ in range(d)] + [rng.uniform(-1.0, 1.0)])
                         for _ in range(restarts - 1)]
    best = None
    for start in starts:
        result = minimize(_negative_lml, start, args=(points, values, noise), method='Nelder-Mead', bounds=bounds,
                          options={'maxiter': 200 * (d + 1), 'xatol': 1e-4, 'fatol': 1e-6})
        if np.isfinite(result.fun) and (best is None or result.fun < best.fun):
            best = result
    theta = best.x if best is not None else theta0
    return GPModel(points, values, np.exp(theta[:d]), math.exp(theta[d]), noise).factorize()


def gp_predict(model, x):
    """
    Posterior mean and variance. The variance is clamped at 0 from below.
    :param model: GPModel
    :param x: a point (d,) or points (m, d)
    :return: (mean, variance), floats for a single point, arrays otherwise
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    k_star = model.kernel(x, model.points)
    mean = k_star @ model.alpha
    v = cho_solve(model.factor, k_star.T)
    variance = np.maximum(model.signal - np.sum(k_star * v.T, axis=1), 0.0)
    mean = model.y_mean + model.y_std * mean
    variance = variance * model.y_std ** 2
    if single:
        return float(mean[0]), float(variance[0])
    return mean, variance


def expected_improvement(mean, variance, best):
    """
    Expected improvement below `best` (minimization). Where the variance is 0 it is max(best - mean, 0).
    :param mean: posterior mean(s)
    :param variance: posterior variance(s)
    :param best: best objective so far
    :return: EI, float or array
    """
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.sqrt(np.maximum(np.asarray(variance, dtype=np.float64), 0.0))
    improvement = best - mean
    with np.errstate(divide='ignore', invalid='ignore'):
        u = np.where(sigma > 0, improvement / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(sigma > 0, improvement * norm.cdf(u) + sigma * norm.pdf(u), np.maximum(improvement, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


@dataclass
class Trial:
    point: List[float]
    raw_config: dict
    objective: Optional[float]
    status: str
    duration_s: float = 0.0
    index: int = 0
    error: Optional[str] = None

    @property
    def completed(self):
        return self.status == TRIAL_COMPLETED

    def to_dict(self):
        return {'index': self.index, 'point': [float(u) for u in self.point], 'raw_config': self.raw_config,
                'objective': self.objective, 'status': self.status, 'duration_s': self.duration_s,
                'error': self.error}

    @classmethod
    def from_dict(cls, data):
        return cls(point=list(data['point']), raw_config=dict(data['raw_config']), objective=data.get('objective'),
                   status=data['status'], duration_s=data.get('duration_s', 0.0), index=data.get('index', 0),
                   error=data.get('error'))


def _initial_point(space, index):
    # skip the origin of the Halton sequence
    sampler = qmc.Halton(d=space.dim, scramble=False)
    sampler.fast_forward(1 + index)
    return sampler.random(1)[0]


def suggest(trials, space, rng, n_initial=HPO_INITIAL_POINTS, pending=(), n_candidates=HPO_CANDIDATES,
            n_local=HPO_LOCAL_CANDIDATES):
    """
    Next normalized point to evaluate. The first n_initial suggestions are Halton points; afterwards the expected
    improvement of a GP surrogate fitted to the completed trials is maximized over random candidates plus local
    perturbations of the incumbent, followed by an L-BFGS-B refinement. Pending points enter the surrogate with the
    best objective so far (constant liar).
    :param trials: list of Trial
    :param space: SearchSpace
    :param rng: numpy Generator
    :param n_initial: number of space-filling suggestions
    :param pending: normalized points under evaluation
    :return: normalized point with integer dimensions rounded
    """
    space.validate()
    completed = [t for t in trials if t.completed]
    issued = len(trials) + len(pending)
    if issued < n_initial or not completed:
        return space.snap(_initial_point(space, issued))

    points = np.array([t.point for t in completed], dtype=np.float64)
    values = np.array([t.objective for t in completed], dtype=np.float64)
    best = float(values.min())
    if len(pending):
        points = np.vstack([points, np.asarray(pending, dtype=np.float64)])
        values = np.concatenate([values, np.full(len(pending), best)])
    model = gp_fit(points, values)

    incumbent = points[int(np.argmin(values))]
    candidates = np.vstack([rng.random((n_candidates, space.dim)),
                            np.clip(incumbent + rng.normal(0.0, HPO_LOCAL_SIGMA, (n_local, space.dim)), 0.0, 1.0)])
    mean, variance = gp_predict(model, candidates)
    scores = expected_improvement(mean, variance, best)
    start = candidates[int(np.argmax(scores))]
    start_score = float(np.max(scores))

    def _negative_ei(x):
        m, v = gp_predict(model, x)
        return -expected_improvement(m, v, best)

    result = minimize(_negative_ei, start, method='L-BFGS-B', bounds=[(0.0, 1.0)] * space.dim)
    chosen = np.clip(result.x, 0.0, 1.0) if np.isfinite(result.fun) and -result.fun > start_score else start
    return space.snap(chosen)


@dataclass
class SearchResult:
    best: Trial
    trials: List[Trial]


def load_history(filename):
    """
    Load the trials of a JSON-lines history file.
    :param filename: history file
    :return: list of Trial
    """
    trials = []
    if not os.path.exists(filename):
        return trials
    with open(filename, 'r', encoding='utf-8') as f:
        for line in f:
            if line.strip():
                trials.append(Trial.from_dict(simplejson.loads(line)))
    return trials


def _takes_trial_index(callback):
    try:
        return 'trial_index' in inspect.signature(callback).parameters
    except (TypeError, ValueError):
        return False


def _evaluate(callback, point, space, index):
    raw_config = space.to_config(point)
    start = time.time()
    try:
        if _takes_trial_index(callback):
            objective = float(callback(raw_config, trial_index=index))
        else:
            objective = float(callback(raw_config))
        error = None if math.isfinite(objective) else 'objective is not finite'
    except Exception as e:
        objective, error = None, '%s: %s' % (type(e).__name__, e)
    duration = round(time.time() - start, 3)
    if error is not None:
        return Trial(point=[float(u) for u in point], raw_config=raw_config, objective=None, status=TRIAL_FAILED,
                     duration_s=duration, index=index, error=error)
    return Trial(point=[float(u) for u in point], raw_config=raw_config, objective=objective, status=TRIAL_COMPLETED,
                 duration_s=duration, index=index)


def run_search(space, budget, callback, seed=0, history_file=None, workers=1, n_initial=HPO_INITIAL_POINTS,
               verbose=True):
    """
    Bayesian optimization of the callback's objective (lower is better). Trials already in the history file count
    towards the budget; every new trial is appended to it. Failed trials are recorded and left out of the surrogate.
    :param space: SearchSpace
    :param budget: total number of trials
    :param callback: function raw_config -> objective; a callback with a trial_index parameter also gets the index
    :param seed: search seed; suggestion i draws from its own stream
    :param history_file: optional JSON-lines history
    :param workers: number of trials evaluated concurrently
    :param n_initial: number of space-filling suggestions
    :param verbose: show a progress bar and failure messages
    :return: SearchResult
    """
    space.validate()
    if budget < 1:
        raise ConfigError('budget must be >= 1')
    trials = load_history(history_file) if history_file else []

    progress = tqdm(total=budget, initial=min(len(trials), budget), desc='Search', disable=not verbose)
    while len(trials) < budget:
        batch = min(max(workers, 1), budget - len(trials))
        points = []
        for i in range(batch):
            rng = make_rng(seed, len(trials) + i)
            points.append(suggest(trials, space, rng, n_initial=n_initial, pending=points))
        indices = [len(trials) + i for i in range(batch)]
        if batch > 1:
            with ThreadPoolExecutor(max_workers=batch) as executor:
                new_trials = list(executor.map(lambda args: _evaluate(callback, args[0], space, args[1]),
                                               zip(points, indices)))
        else:
            new_trials = [_evaluate(callback, points[0], space, indices[0])]
        for trial in new_trials:
            if not trial.completed and verbose:
                print('[!] Trial %d failed: %s' % (trial.index, trial.error))
            if history_file:
                append_json_line(history_file, trial.to_dict())
            trials.append(trial)
            progress.update(1)
    progress.close()

    completed = [t for t in trials if t.completed]
    if not completed:
        raise SearchError('all %d trials failed' % len(trials))
    best = min(completed, key=lambda t: (t.objective, t.index))
    return SearchResult(best=best, trials=trials)


def apply_hyperparameters(raw_config, model_config, train_config):
    """
    Copies of the model and training configuration with the searched hyperparameters applied.
    :param raw_config: dict name -> value
    :param model_config: ModelConfig
    :param train_config: TrainConfig
    :return: (ModelConfig, TrainConfig)
    """
    model_config = copy.deepcopy(model_config)
    train_config = copy.deepcopy(train_config)
    for name, value in raw_config.items():
        if name == 'learning_rate':
            train_config.optimizer.learning_rate = float(value)
        elif name == 'latent_dim':
            model_config.latent_dim = int(value)
        elif name == 'shared_conv_channels':
            model_config.shared_channels = int(value)
        elif name in ['w_rec', 'w_regr', 'w_kld']:
            setattr(train_config.weights, name, float(value))
        else:
            raise ConfigError("unknown search dimension '%s'" % name)
    return model_config, train_config


def training_objective(model_config, train_config, nat, syn=None, search_epochs=HPO_SEARCH_EPOCHS, run_root=None):
    """
    Build the trainer callback of a search: a training run truncated to search_epochs whose objective is the final
    validation MAE on the natural data (the synthetic validation MAE when no natural validation sample is labeled).
    :param model_config: ModelConfig
    :param train_config: TrainConfig with a resolved seed
    :param nat: natural DatasetManifest
    :param syn: synthetic DatasetManifest or None
    :param search_epochs: epochs per trial
    :param run_root: optional directory receiving one run directory per trial
    :return: function raw_config -> objective
    """
    from training import train
    counter = itertools.count()

    def _objective(raw_config, trial_index=None):
        trial_model, trial_train = apply_hyperparameters(raw_config, model_config, train_config)
        trial_train.max_epochs = search_epochs
        trial_train.regressor_start_epoch = min(trial_train.regressor_start_epoch, search_epochs // 2)
        trial_train.patience = min(trial_train.patience, search_epochs)
        run_dir = None
        if run_root is not None:
            index = next(counter) if trial_index is None else trial_index
            run_dir = os.path.join(run_root, 'trial_%04d' % index)
        result = train(trial_model, trial_train, nat, syn, run_dir=run_dir, verbose=False)
        last = result.validation_log.iloc[-1]
        objective = last['val_mae_nat']
        if not np.isfinite(objective):
            objective = last['val_mae_syn']
        return float(objective)

    return _objective


def write_best_trial(result, filename, quiet=False):
    return write_json(filename, {'best': result.best.to_dict(),
                                 'completed': sum(1 for t in result.trials if t.completed),
                                 'failed': sum(1 for t in result.trials if not t.completed)}, quiet=quiet)
