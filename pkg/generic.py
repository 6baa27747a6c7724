import os
import dataclasses
from io import StringIO
import numpy as np
import simplejson
from PIL import Image as PILImage
from ruamel.yaml import YAML
from constants import *


class TwinCountError(Exception):
    """
    Base class of all errors raised by TwinCount.
    """


class ConfigError(TwinCountError):
    pass


class ManifestError(TwinCountError):
    """
    A dataset manifest row failed validation. The row number counts the header as row 1.
    """

    def __init__(self, message, row=None, path=None):
        self.row = row
        self.path = path
        location = ''
        if path is not None:
            location += str(path)
        if row is not None:
            location += (':' if location else 'row ') + str(row)
        super().__init__(('%s: %s' % (location, message)) if location else message)


class DatasetError(TwinCountError):
    pass


class PlacementError(TwinCountError):
    pass


class ShapeError(TwinCountError, ValueError):
    pass


class CheckpointError(TwinCountError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, tensor_name, expected, found):
        self.tensor_name = tensor_name
        super().__init__("Tensor '%s' has shape %s in the checkpoint but the model expects %s"
                         % (tensor_name, tuple(found), tuple(expected)))


class DivergenceError(TwinCountError):
    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class GPFitError(TwinCountError):
    pass


class SearchError(TwinCountError):
    pass


class RunLockedError(TwinCountError):
    pass


# errors which the command line reports with the validation exit code
VALIDATION_ERRORS = (ConfigError, ManifestError, DatasetError, ShapeError, CheckpointError)


def init_yaml():
    """
    Initialize ruamel.yaml with the correct settings
    :return: a ruamel.yaml object
    """
    _yaml = YAML()
    _yaml.Representer.ignore_aliases = lambda *args: True  # disable anchors/aliases
    return _yaml


def load_config_file(filename):
    """
    Load a JSON or YAML configuration file into plain Python dicts and lists.
    :param filename: path to a .json, .yaml or .yml file
    :return: the parsed document
    """
    if not os.path.exists(filename):
        raise ConfigError('Configuration file does not exist: ' + str(filename))

    with open(filename, 'r', encoding='utf-8') as f:
        content = f.read()

    try:
        if str(filename).lower().endswith(('.yaml', '.yml')):
            _yaml = init_yaml()
            return simplejson.loads(simplejson.dumps(_yaml.load(StringIO(content))))
        return simplejson.loads(content)
    except Exception as e:
        raise ConfigError('Could not parse configuration file %s: %s' % (filename, e))


def dumps_json(obj):
    """
    Serialize to JSON in the canonical form used for every artefact (sorted keys, LF endings).
    :param obj: JSON serializable object
    :return: JSON string ending with a newline
    """
    return simplejson.dumps(obj, sort_keys=True, indent=2) + '\n'


def dataclass_from_dict(cls, data, section=None):
    """
    Build a dataclass from a dict, rejecting unknown keys. Nested dataclass fields must be
    converted by the caller.
    :param cls: dataclass type
    :param data: dict with field values
    :param section: name used in error messages
    :return: instance of cls
    """
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError("Section '%s' must be a mapping" % (section or cls.__name__))
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError("Unknown key(s) in section '%s': %s" % (section or cls.__name__, ', '.join(unknown)))
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            value = data[f.name]
            # JSON has no tuples
            if isinstance(f.default, tuple) and isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError("Invalid section '%s': %s" % (section or cls.__name__, e))


def dataclass_to_dict(obj):
    """
    Convert a dataclass to a JSON friendly dict (tuples become lists).
    :param obj: dataclass instance
    :return: dict
    """
    def _convert(value):
        if dataclasses.is_dataclass(value):
            return {f.name: _convert(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, (list, tuple)):
            return [_convert(v) for v in value]
        if isinstance(value, dict):
            return {str(k): _convert(v) for k, v in value.items()}
        if isinstance(value, np.generic):
            return value.item()
        return value
    return _convert(obj)


def derive_seed(seed, *keys):
    """
    Derive an independent 64-bit seed from a base seed and a path of integer keys.
    :param seed: base seed
    :param keys: stream identifiers, e.g. sample index
    :return: integer in [0, 2**64)
    """
    words = np.random.SeedSequence([int(seed)] + [int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


def make_rng(seed, *keys):
    """
    Create a numpy Generator for the stream identified by (seed, keys).
    :param seed: base seed
    :param keys: stream identifiers
    :return: numpy.random.Generator
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))


def resolve_seed(arg_seed=None, config_seed=None):
    """
    Resolve the seed: command line flag, then configuration, then the environment variable, then 0.
    :param arg_seed: seed given on the command line
    :param config_seed: seed from the configuration file
    :return: integer seed
    """
    if arg_seed is not None:
        return int(arg_seed)
    if config_seed is not None:
        return int(config_seed)
    env_seed = os.getenv(ENV_SEED)
    if env_seed:
        try:
            return int(env_seed)
        except ValueError:
            raise ConfigError('Environment variable %s is not an integer: %s' % (ENV_SEED, env_seed))
    return 0


def check_image(image, name='image'):
    """
    Check the Image invariants: 128x128, finite, every pixel in [0, 1].
    :param image: 2-D numpy array
    :param name: name used in error messages
    :return: the image as float32
    """
    image = np.asarray(image)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError('%s must be %dx%d, got %s' % (name, IMAGE_SIZE, IMAGE_SIZE, image.shape))
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ShapeError('%s has pixels outside [0, 1]' % name)
    return image.astype(np.float32, copy=False)


def to_uint8(image):
    """
    Quantize a [0, 1] image to 8-bit gray levels with round(pixel * 255).
    :param image: float image
    :return: uint8 array
    """
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_png(filename):
    """
    Read an 8-bit grayscale PNG as float32 in [0, 1].
    :param filename: path to the PNG file
    :return: 2-D numpy array
    """
    with PILImage.open(filename) as img:
        return np.asarray(img.convert('L'), dtype=np.float32) / 255.0


def write_png(filename, image):
    """
    Write a [0, 1] image as an 8-bit grayscale PNG.
    :param filename: output path
    :param image: float image
    :return:
    """
    PILImage.fromarray(to_uint8(image)).save(filename, format='PNG')
