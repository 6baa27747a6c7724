import os
from dataclasses import dataclass, field
from typing import List, Optional
import numpy as np
import pandas as pd
from skimage.transform import resize
from constants import *
from generic import ManifestError, DatasetError, ConfigError, ShapeError, read_png, make_rng


@dataclass
class Sample:
    """
    One 128x128 grayscale image with an optional cell count label.
    """
    image: np.ndarray
    label: Optional[int]
    domain: str
    id: str
    seed: Optional[int] = None

    @property
    def is_labeled(self):
        return self.label is not None


@dataclass
class DatasetManifest:
    samples: List[Sample] = field(default_factory=list)
    directory: Optional[str] = None

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, index):
        return self.samples[index]

    @property
    def domains(self):
        return sorted({s.domain for s in self.samples})

    @property
    def domain(self):
        """
        The single domain tag of this manifest.
        :return: 'nat' or 'syn'
        """
        domains = self.domains
        if len(domains) != 1:
            raise DatasetError('Manifest does not have a single domain: %s' % (domains or 'empty'))
        return domains[0]

    def subset(self, indices):
        return DatasetManifest([self.samples[i] for i in indices], self.directory)

    def labeled(self):
        return DatasetManifest([s for s in self.samples if s.is_labeled], self.directory)

    def labels(self):
        """
        :return: float array with NaN for unlabeled samples
        """
        return np.array([np.nan if s.label is None else float(s.label) for s in self.samples], dtype=np.float64)

    def image_array(self):
        """
        :return: float32 array of shape (n, 128, 128)
        """
        if not self.samples:
            return np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
        return np.stack([s.image for s in self.samples]).astype(np.float32, copy=False)

    def split(self, fraction, seed):
        """
        Seeded split into (rest, held_out) where held_out has round(n * fraction) samples.
        :param fraction: held out fraction in [0, 1)
        :param seed: split seed
        :return: tuple of two manifests
        """
        n = len(self.samples)
        n_held = int(round(n * fraction))
        if fraction > 0 and n >= 2:
            n_held = min(max(n_held, 1), n - 1)
        order = make_rng(seed).permutation(n)
        held = sorted(order[:n_held].tolist())
        rest = sorted(order[n_held:].tolist())
        return self.subset(rest), self.subset(held)

    def hide_labels(self, keep, seed):
        """
        Keep the labels of a seeded subset of `keep` labeled samples and drop all others.
        :param keep: number of labels to keep
        :param seed: selection seed
        :return: new manifest
        """
        labeled_idx = [i for i, s in enumerate(self.samples) if s.is_labeled]
        chosen = set(make_rng(seed).permutation(labeled_idx)[:keep].tolist()) if labeled_idx else set()
        samples = [Sample(s.image, s.label if i in chosen else None, s.domain, s.id, s.seed)
                   for i, s in enumerate(self.samples)]
        return DatasetManifest(samples, self.directory)

    @staticmethod
    def concat(*manifests):
        samples = []
        for m in manifests:
            samples.extend(m.samples)
        return DatasetManifest(samples, manifests[0].directory if manifests else None)


@dataclass
class AugmentConfig:
    hflip_prob: float = AUG_FLIP_PROB
    vflip_prob: float = AUG_FLIP_PROB
    crop_scale: float = AUG_CROP_SCALE
    rot90: bool = True
    noise_amplitude: float = AUG_NOISE_AMPLITUDE

    def validate(self):
        for name in ['hflip_prob', 'vflip_prob']:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError('%s must be a probability, got %s' % (name, getattr(self, name)))
        if not 0.0 < self.crop_scale <= 1.0:
            raise ConfigError('crop_scale must be in (0, 1], got %s' % self.crop_scale)
        if self.noise_amplitude < 0:
            raise ConfigError('noise_amplitude must be >= 0')
        return self

    @property
    def crop_size(self):
        return int(np.floor(IMAGE_SIZE * self.crop_scale))

    @classmethod
    def identity(cls):
        return cls(hflip_prob=0.0, vflip_prob=0.0, crop_scale=1.0, rot90=False, noise_amplitude=0.0)


@dataclass
class Batch:
    images: np.ndarray
    labels: List[Optional[int]]
    domain: str
    ids: List[str]

    @property
    def size(self):
        return len(self.ids)

    def label_array(self):
        """
        :return: (labels with NaN for missing, boolean labeled mask)
        """
        labels = np.array([np.nan if l is None else float(l) for l in self.labels], dtype=np.float64)
        return labels, ~np.isnan(labels)


def _parse_row(row, row_number, manifest_file, directory, labeled_required):
    filename = row['filename'].strip()
    if not filename:
        raise ManifestError('empty filename', row_number, manifest_file)
    path = os.path.join(directory, filename)
    if not os.path.exists(path):
        raise ManifestError("image file '%s' does not exist" % filename, row_number, manifest_file)

    count_text = row['count'].strip()
    label = None
    if count_text:
        try:
            label = int(count_text)
        except ValueError:
            raise ManifestError("count '%s' is not an integer" % count_text, row_number, manifest_file)
        if not MIN_COUNT <= label <= MAX_COUNT:
            raise ManifestError('count %d is outside [%d, %d]' % (label, MIN_COUNT, MAX_COUNT), row_number, manifest_file)
    elif labeled_required:
        raise ManifestError('count is missing', row_number, manifest_file)

    domain = row['domain'].strip()
    if domain not in DOMAINS:
        raise ManifestError("domain '%s' is not one of %s" % (domain, DOMAINS), row_number, manifest_file)

    seed_text = row['seed'].strip()
    seed = None
    if seed_text:
        try:
            seed = int(seed_text)
        except ValueError:
            raise ManifestError("seed '%s' is not an integer" % seed_text, row_number, manifest_file)

    try:
        image = read_png(path)
    except (OSError, ValueError) as e:
        raise ManifestError("image '%s' cannot be read: %s" % (filename, e), row_number, manifest_file)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ManifestError("image '%s' is %dx%d, expected %dx%d" % (filename, image.shape[1], image.shape[0],
                                                                    IMAGE_SIZE, IMAGE_SIZE), row_number, manifest_file)
    return Sample(image=image, label=label, domain=domain, id=filename, seed=seed)


def load_dataset(directory, labeled_required=False):
    """
    Load and validate a dataset directory holding manifest.csv and the referenced PNG images.
    :param directory: dataset directory
    :param labeled_required: reject rows without a count
    :return: DatasetManifest
    """
    manifest_file = os.path.join(directory, MANIFEST_FILENAME)
    if not os.path.exists(manifest_file):
        raise ManifestError('manifest does not exist', path=manifest_file)

    try:
        df = pd.read_csv(manifest_file, dtype=str, keep_default_na=False, encoding='utf-8')
    except Exception as e:
        raise ManifestError('cannot parse CSV: %s' % e, path=manifest_file)

    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise ManifestError('missing column(s): %s' % ', '.join(missing), 1, manifest_file)

    samples = []
    for idx, row in enumerate(df.to_dict('records')):
        # the header is row 1
        samples.append(_parse_row(row, idx + 2, manifest_file, directory, labeled_required))

    return DatasetManifest(samples, directory)


def _bilinear_resize(image, size):
    return resize(image, (size, size), order=1, mode='edge', anti_aliasing=False, preserve_range=True).astype(np.float32)


def augment(image, config, rng):
    """
    Apply, in order: horizontal flip, vertical flip, random resized crop, random k*90 degree rotation and additive
    zero-centered uniform noise, then clamp to [0, 1]. Every random draw is consumed in the same order whatever the
    configuration, so one rng stream yields the same geometry for equal configurations.
    :param image: 128x128 float image
    :param config: AugmentConfig
    :param rng: numpy Generator
    :return: augmented 128x128 image
    """
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError('augment expects a %dx%d image, got %s' % (IMAGE_SIZE, IMAGE_SIZE, image.shape))

    u_hflip, u_vflip = rng.random(2)
    if u_hflip < config.hflip_prob:
        image = image[:, ::-1]
    if u_vflip < config.vflip_prob:
        image = image[::-1, :]

    crop = config.crop_size
    max_offset = IMAGE_SIZE - crop
    off_y, off_x = rng.integers(0, max_offset + 1, size=2)
    if crop < IMAGE_SIZE:
        image = _bilinear_resize(image[off_y:off_y + crop, off_x:off_x + crop], IMAGE_SIZE)

    k = int(rng.integers(0, 4))
    if config.rot90 and k:
        image = np.rot90(image, k)

    noise = rng.uniform(-1.0, 1.0, size=(IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32)
    if config.noise_amplitude > 0:
        image = image + config.noise_amplitude * noise

    return np.ascontiguousarray(np.clip(image, 0.0, 1.0), dtype=np.float32)


def make_batches(manifest, batch_size, rng, augment_config=None):
    """
    One epoch of batches: the sample order is shuffled from rng, the final short batch is emitted and augmentation
    uses a stream derived per batch.
    :param manifest: DatasetManifest with a single domain
    :param batch_size: samples per batch
    :param rng: numpy Generator
    :param augment_config: optional AugmentConfig
    :return: generator of Batch
    """
    if batch_size < 1:
        raise ConfigError('batch_size must be >= 1')
    if len(manifest) == 0:
        raise DatasetError('Cannot batch an empty manifest')
    domain = manifest.domain

    order = rng.permutation(len(manifest))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batch_rng = np.random.default_rng(rng.integers(0, 2 ** 63))
        images = []
        for i in idx:
            image = manifest.samples[i].image
            if augment_config is not None:
                image = augment(image, augment_config, batch_rng)
            images.append(image)
        yield Batch(images=np.stack(images).astype(np.float32, copy=False),
                    labels=[manifest.samples[i].label for i in idx],
                    domain=domain,
                    ids=[manifest.samples[i].id for i in idx])


def cycle_batches(manifest, batch_size, rng, augment_config=None):
    """
    Endless batch stream which reshuffles after every pass over the manifest.
    :return: generator of Batch
    """
    while True:
        for batch in make_batches(manifest, batch_size, rng, augment_config):
            yield batch
