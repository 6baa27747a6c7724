from dataclasses import dataclass, field
from typing import Optional
from constants import *
from generic import ConfigError, dataclass_from_dict, dataclass_to_dict, load_config_file, dumps_json
from synthgen import GeneratorConfig
from dataio import AugmentConfig
from twinvae import ModelConfig
from training import LossWeights, OptimizerConfig, TrainConfig
from baseline_cv import WatershedParams
from hyperopt import SearchSpace


@dataclass
class PathsConfig:
    syn: Optional[str] = None
    nat: Optional[str] = None
    data: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    grid: Optional[str] = None


@dataclass
class HPOConfig:
    budget: int = 20
    search_epochs: int = HPO_SEARCH_EPOCHS
    workers: int = 1
    n_initial: int = HPO_INITIAL_POINTS

    def validate(self):
        if self.budget < 1:
            raise ConfigError('hpo budget must be >= 1')
        if self.search_epochs < 1:
            raise ConfigError('hpo search_epochs must be >= 1')
        if self.workers < 1:
            raise ConfigError('hpo workers must be >= 1')
        if self.n_initial < 1:
            raise ConfigError('hpo n_initial must be >= 1')
        return self


@dataclass
class RunConfig:
    """
    Every section of a run: the sections of the JSON/YAML config file map one to one onto the fields.
    The train section holds the schedule only; weights, optimizer and augmentation are top-level sections.
    """
    version: float = RUN_CONFIG_VERSION
    seed: Optional[int] = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    search: SearchSpace = field(default_factory=SearchSpace)
    hpo: HPOConfig = field(default_factory=HPOConfig)
    watershed: WatershedParams = field(default_factory=WatershedParams)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def train_config(self, seed):
        """
        The TrainConfig of this run with the top-level weights, optimizer and augmentation attached.
        :param seed: resolved seed
        :return: TrainConfig
        """
        config = self.train
        config.weights = self.weights
        config.optimizer = self.optimizer
        config.augmentation = self.augmentation
        config.seed = seed
        return config

    def validate(self):
        if self.version != RUN_CONFIG_VERSION:
            raise ConfigError('config version %s is not supported, expected %s' % (self.version, RUN_CONFIG_VERSION))
        self.generator.validate()
        self.augmentation.validate()
        self.model.validate()
        self.weights.validate()
        self.optimizer.validate()
        self.train_config(self.seed).validate()
        self.search.validate()
        self.hpo.validate()
        self.watershed.validate()
        return self

    def to_dict(self):
        train = dataclass_to_dict(self.train)
        for nested in ['weights', 'optimizer', 'augmentation', 'seed']:
            train.pop(nested, None)
        return {'version': self.version,
                'seed': self.seed,
                'generator': self.generator.to_dict(),
                'augmentation': dataclass_to_dict(self.augmentation),
                'model': self.model.to_dict(),
                'train': train,
                'weights': self.weights.to_dict(),
                'optimizer': self.optimizer.to_dict(),
                'search': self.search.to_dict(),
                'hpo': dataclass_to_dict(self.hpo),
                'watershed': self.watershed.to_dict(),
                'paths': dataclass_to_dict(self.paths)}

    def dumps(self):
        return dumps_json(self.to_dict())

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = sorted(set(data) - set(RUN_CONFIG_SECTIONS))
        if unknown:
            raise ConfigError('Unknown section(s) in the configuration: %s' % ', '.join(unknown))
        train_data = dict(data.get('train') or {})
        for nested in ['weights', 'optimizer', 'augmentation', 'seed']:
            if nested in train_data:
                raise ConfigError("'%s' is a top-level section, not part of 'train'" % nested)
        config = cls(version=data.get('version', RUN_CONFIG_VERSION),
                     seed=data.get('seed'),
                     generator=GeneratorConfig.from_dict(data.get('generator')),
                     augmentation=dataclass_from_dict(AugmentConfig, data.get('augmentation'), 'augmentation'),
                     model=ModelConfig.from_dict(data.get('model')),
                     train=dataclass_from_dict(TrainConfig, train_data, 'train'),
                     weights=LossWeights.from_dict(data.get('weights')),
                     optimizer=OptimizerConfig.from_dict(data.get('optimizer')),
                     search=SearchSpace.from_dict(data.get('search')),
                     hpo=dataclass_from_dict(HPOConfig, data.get('hpo'), 'hpo'),
                     watershed=WatershedParams.from_dict(data.get('watershed')),
                     paths=dataclass_from_dict(PathsConfig, data.get('paths'), 'paths'))
        return config


def load_run_config(filename=None):
    """
    Load a RunConfig from a JSON or YAML file; no file gives the defaults.
    :param filename: config file or None
    :return: RunConfig
    """
    if filename is None:
        return RunConfig()
    return RunConfig.from_dict(load_config_file(filename))
