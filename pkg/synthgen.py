import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Dict, List, Optional, Tuple
import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter
from tqdm import tqdm
from constants import *
from generic import ConfigError, PlacementError, dataclass_from_dict, dataclass_to_dict, derive_seed, \
    make_rng, check_image, to_uint8, write_png
from file_output import write_file, write_json
from dataio import DatasetManifest, Sample, load_dataset


@dataclass
class CellSpec:
    center_x: float
    center_y: float
    radius_a: float
    radius_b: float
    rotation: float
    interior_brightness: float
    membrane_brightness: float
    membrane_width: float
    blur_sigma: float
    deformation_amplitude: float
    texture_amplitude: float = 0.0

    def validate(self):
        if self.radius_a <= 0 or self.radius_b <= 0:
            raise ConfigError('Cell radii must be > 0')
        for name in ['interior_brightness', 'membrane_brightness', 'deformation_amplitude']:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError('%s must be in [0, 1], got %s' % (name, getattr(self, name)))
        if self.membrane_width < 0 or self.blur_sigma < 0 or self.texture_amplitude < 0:
            raise ConfigError('membrane_width, blur_sigma and texture_amplitude must be >= 0')
        return self


def cell_radius(cell):
    """
    Nominal outer radius of a cell: the larger semi-axis plus the membrane width.
    :param cell: CellSpec
    :return: radius in pixels
    """
    return max(cell.radius_a, cell.radius_b) + cell.membrane_width


def cell_extent(cell):
    """
    Radius of the disk which contains the rendered cell including contour deformation.
    :param cell: CellSpec
    :return: radius in pixels
    """
    return max(cell.radius_a, cell.radius_b) * (1.0 + cell.deformation_amplitude) + cell.membrane_width


@dataclass
class SceneSpec:
    cells: List[CellSpec]
    background_id: str
    background_brightness_scale: float
    noise_amplitude: float
    global_blur_sigma: float
    smudges: List[CellSpec]
    seed: int

    @property
    def label(self):
        return len(self.cells)

    def to_dict(self):
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['cells'] = [dataclass_from_dict(CellSpec, c, 'cells') for c in data.get('cells', [])]
        data['smudges'] = [dataclass_from_dict(CellSpec, c, 'smudges') for c in data.get('smudges', [])]
        return dataclass_from_dict(cls, data, 'scene')


def default_count_distribution(p=GEN_GEOMETRIC_P):
    """
    Truncated geometric distribution over the counts 1..30 with its mode at 1.
    :param p: success probability of the geometric distribution
    :return: dict count -> probability
    """
    counts = np.arange(MIN_COUNT, MAX_COUNT + 1)
    weights = (1.0 - p) ** (counts - 1)
    weights /= weights.sum()
    return {int(c): float(w) for c, w in zip(counts, weights)}


@dataclass
class GeneratorConfig:
    style: str = STYLE_SYN_PC
    count_distribution: Optional[Dict[int, float]] = None
    overlap_policy: str = OVERLAP_ALLOW
    min_distance_factor: float = GEN_MIN_DISTANCE_FACTOR
    max_overlap: float = GEN_MAX_OVERLAP
    radius_range: Tuple[float, float] = GEN_RADIUS_RANGE
    aspect_range: Tuple[float, float] = GEN_ASPECT_RANGE
    membrane_width_range: Tuple[float, float] = GEN_MEMBRANE_WIDTH_RANGE
    cell_blur_range: Tuple[float, float] = GEN_CELL_BLUR_RANGE
    global_blur_range: Tuple[float, float] = GEN_GLOBAL_BLUR_RANGE
    noise_range: Tuple[float, float] = GEN_NOISE_RANGE
    interior_range: Optional[Tuple[float, float]] = None
    membrane_range: Optional[Tuple[float, float]] = None
    brightness_scale_range: Optional[Tuple[float, float]] = None
    deformation_range: Optional[Tuple[float, float]] = None
    texture_range: Optional[Tuple[float, float]] = None
    smudge_count_range: Optional[Tuple[int, int]] = None
    background: str = BACKGROUND_PROCEDURAL
    background_corpus: Optional[str] = None
    background_max_count: int = GEN_BACKGROUND_MAX_COUNT
    max_placement_attempts: int = GEN_MAX_PLACEMENT_ATTEMPTS
    resolution: int = IMAGE_SIZE

    def __post_init__(self):
        if self.style not in STYLES:
            raise ConfigError("Unknown style '%s', choose one of: %s" % (self.style, ', '.join(STYLES)))
        style_defaults = STYLE_DEFAULTS[self.style]
        for name in ['interior_range', 'membrane_range', 'brightness_scale_range', 'deformation_range',
                     'texture_range', 'smudge_count_range']:
            if getattr(self, name) is None:
                setattr(self, name, tuple(style_defaults[name]))
            else:
                setattr(self, name, tuple(getattr(self, name)))
        for f in fields(self):
            if f.name.endswith('_range'):
                setattr(self, f.name, tuple(getattr(self, f.name)))
        if self.count_distribution is None:
            self.count_distribution = default_count_distribution()
        else:
            # JSON object keys are strings
            self.count_distribution = {int(k): float(v) for k, v in self.count_distribution.items()}

    @property
    def domain(self):
        return STYLE_DOMAIN[self.style]

    @property
    def background_level(self):
        return STYLE_DEFAULTS[self.style]['background_level']

    def count_probabilities(self):
        """
        :return: probability vector indexed by cell count 0..30
        """
        probs = np.zeros(MAX_COUNT + 1)
        for count, p in self.count_distribution.items():
            probs[count] = p
        return probs / probs.sum()

    def validate(self):
        if self.resolution != IMAGE_SIZE:
            raise ConfigError('resolution is fixed to %d' % IMAGE_SIZE)
        if not self.count_distribution:
            raise ConfigError('count_distribution is empty')
        for count, p in self.count_distribution.items():
            if not 0 <= count <= MAX_COUNT:
                raise ConfigError('count_distribution has count %d outside [0, %d]' % (count, MAX_COUNT))
            if p < 0:
                raise ConfigError('count_distribution has a negative probability for count %d' % count)
        if abs(sum(self.count_distribution.values()) - 1.0) > 1e-6:
            raise ConfigError('count_distribution must sum to 1, sums to %.6f' % sum(self.count_distribution.values()))
        if self.overlap_policy not in [OVERLAP_FORBID, OVERLAP_ALLOW]:
            raise ConfigError("overlap_policy must be '%s' or '%s'" % (OVERLAP_FORBID, OVERLAP_ALLOW))
        if self.background not in [BACKGROUND_PROCEDURAL, BACKGROUND_MEAN]:
            raise ConfigError("background must be '%s' or '%s'" % (BACKGROUND_PROCEDURAL, BACKGROUND_MEAN))
        if self.background == BACKGROUND_MEAN and not self.background_corpus:
            raise ConfigError('a mean background needs a background_corpus directory')
        for f in fields(self):
            if f.name.endswith('_range'):
                low, high = getattr(self, f.name)
                if low > high or low < 0:
                    raise ConfigError('%s must satisfy 0 <= low <= high, got %s' % (f.name, (low, high)))
        if self.radius_range[0] <= 0:
            raise ConfigError('radius_range must be > 0')
        for name in ['interior_range', 'membrane_range', 'deformation_range']:
            if getattr(self, name)[1] > 1.0:
                raise ConfigError('%s must lie in [0, 1]' % name)
        low, high = self.brightness_scale_range
        if low < 0.5 or high > 1.5:
            raise ConfigError('brightness_scale_range must lie in [0.5, 1.5]')
        if self.aspect_range[1] > 1.0:
            raise ConfigError('aspect_range is a minor/major ratio and must lie in (0, 1]')
        if self.domain == DOMAIN_SYN and self.smudge_count_range[1] > 0:
            raise ConfigError("synthetic style '%s' renders no smudges, smudge_count_range must be (0, 0)"
                              % self.style)
        if self.max_placement_attempts < 1:
            raise ConfigError('max_placement_attempts must be >= 1')
        return self

    def to_dict(self):
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return dataclass_from_dict(cls, data, 'generator')


def _placement_ok(cell, centers, radii, config):
    if not centers:
        return True
    centers = np.asarray(centers)
    radii = np.asarray(radii)
    dist = np.hypot(centers[:, 0] - cell.center_x, centers[:, 1] - cell.center_y)
    r = cell_radius(cell)
    if config.overlap_policy == OVERLAP_FORBID:
        return bool(np.all(dist >= config.min_distance_factor * (radii + r)))
    # overlap fraction: penetration depth relative to the diameter of the smaller cell
    depth = np.maximum(radii + r - dist, 0.0)
    fraction = depth / (2.0 * np.minimum(radii, r))
    return bool(np.all(fraction <= config.max_overlap))


def _draw_cell_geometry(rng, config):
    radius_a = rng.uniform(*config.radius_range)
    radius_b = radius_a * rng.uniform(*config.aspect_range)
    return dict(radius_a=float(radius_a),
                radius_b=float(radius_b),
                rotation=float(rng.uniform(0.0, np.pi)),
                interior_brightness=float(rng.uniform(*config.interior_range)),
                membrane_brightness=float(rng.uniform(*config.membrane_range)),
                membrane_width=float(rng.uniform(*config.membrane_width_range)),
                blur_sigma=float(rng.uniform(*config.cell_blur_range)),
                deformation_amplitude=float(rng.uniform(*config.deformation_range)),
                texture_amplitude=float(rng.uniform(*config.texture_range)))


def sample_scene(config, seed):
    """
    Draw a scene from the generator configuration. The result is a pure function of (config, seed).
    :param config: GeneratorConfig
    :param seed: 64-bit integer seed
    :return: SceneSpec
    """
    rng = np.random.default_rng(int(seed))
    count = int(rng.choice(MAX_COUNT + 1, p=config.count_probabilities()))
    scale = float(rng.uniform(*config.brightness_scale_range))
    noise = float(rng.uniform(*config.noise_range))
    global_blur = float(rng.uniform(*config.global_blur_range))

    cells, centers, radii = [], [], []
    for index in range(count):
        geometry = _draw_cell_geometry(rng, config)
        placed = None
        for attempt in range(config.max_placement_attempts):
            # a different geometry may fit where this one cannot
            if attempt and attempt % 100 == 0:
                geometry = _draw_cell_geometry(rng, config)
            candidate = CellSpec(center_x=0.0, center_y=0.0, **geometry)
            extent = cell_extent(candidate)
            if 2 * extent >= IMAGE_SIZE:
                raise PlacementError('cell of extent %.1f px does not fit into the frame' % extent)
            candidate.center_x = float(rng.uniform(extent, IMAGE_SIZE - extent))
            candidate.center_y = float(rng.uniform(extent, IMAGE_SIZE - extent))
            if _placement_ok(candidate, centers, radii, config):
                placed = candidate
                break
        if placed is None:
            raise PlacementError('could not place cell %d of %d after %d attempts (seed %d, overlap policy %s)'
                                 % (index + 1, count, config.max_placement_attempts, seed, config.overlap_policy))
        cells.append(placed)
        centers.append((placed.center_x, placed.center_y))
        radii.append(cell_radius(placed))

    smudges = []
    n_smudges = int(rng.integers(config.smudge_count_range[0], config.smudge_count_range[1] + 1))
    for _ in range(n_smudges):
        radius = float(rng.uniform(*GEN_SMUDGE_RADIUS_RANGE))
        brightness = float(rng.uniform(*config.membrane_range))
        smudges.append(CellSpec(center_x=float(rng.uniform(radius, IMAGE_SIZE - radius)),
                                center_y=float(rng.uniform(radius, IMAGE_SIZE - radius)),
                                radius_a=radius,
                                radius_b=radius * float(rng.uniform(0.6, 1.0)),
                                rotation=float(rng.uniform(0.0, np.pi)),
                                interior_brightness=brightness,
                                membrane_brightness=brightness,
                                membrane_width=0.0,
                                blur_sigma=1.0,
                                deformation_amplitude=0.0))

    return SceneSpec(cells=cells,
                     background_id=config.background,
                     background_brightness_scale=scale,
                     noise_amplitude=noise,
                     global_blur_sigma=global_blur,
                     smudges=smudges,
                     seed=int(seed))


def build_background(source=BACKGROUND_PROCEDURAL, images=None, level=STYLE_DEFAULTS[STYLE_SYN_PC]['background_level']):
    """
    Build a background image. The procedural background is a cultivation chamber: a bright rectangle with a mild
    horizontal gradient surrounded by darker chamber walls. The mean background is the per-pixel mean of images.
    :param source: 'procedural' or 'mean'
    :param images: list of 128x128 images for the mean background
    :param level: chamber brightness of the procedural background
    :return: 128x128 float32 image
    """
    if source == BACKGROUND_MEAN:
        if not images:
            raise ConfigError('a mean background needs at least one image')
        stack = np.stack([check_image(img, 'background image') for img in images]).astype(np.float64)
        return stack.mean(axis=0).astype(np.float32)
    if source != BACKGROUND_PROCEDURAL:
        raise ConfigError("Unknown background source '%s'" % source)

    x = np.arange(IMAGE_SIZE, dtype=np.float64)
    gradient = 0.06 * level * (x / (IMAGE_SIZE - 1) - 0.5)
    background = np.tile(level + gradient, (IMAGE_SIZE, 1))
    m = GEN_CHAMBER_MARGIN
    walls = np.ones((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    walls[m:IMAGE_SIZE - m, m:IMAGE_SIZE - m] = False
    background[walls] = 0.55 * level
    return np.clip(background, 0.0, 1.0).astype(np.float32)


@lru_cache(maxsize=8)
def _mean_background(corpus, max_count):
    manifest = load_dataset(corpus)
    few = [s.image for s in manifest if s.label is not None and s.label <= max_count]
    if not few:
        few = [s.image for s in manifest]
    return build_background(BACKGROUND_MEAN, few)


def background_image(background_id, config):
    """
    Look up a background of the background bank.
    :param background_id: 'procedural' or 'mean'
    :param config: GeneratorConfig
    :return: 128x128 image
    """
    if background_id == BACKGROUND_MEAN:
        return _mean_background(config.background_corpus, config.background_max_count)
    return build_background(BACKGROUND_PROCEDURAL, level=config.background_level)


_GRID_Y, _GRID_X = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5


def _cell_layer(cell, contour_rng, texture_rng):
    """
    Rasterize one cell as (alpha, premultiplied intensity).
    """
    dx = _GRID_X - cell.center_x
    dy = _GRID_Y - cell.center_y
    cos_r, sin_r = np.cos(cell.rotation), np.sin(cell.rotation)
    u = (dx * cos_r + dy * sin_r) / cell.radius_a
    v = (-dx * sin_r + dy * cos_r) / cell.radius_b
    rho = np.hypot(u, v)

    contour = np.ones_like(rho)
    if cell.deformation_amplitude > 0:
        theta = np.arctan2(v, u)
        harmonics = np.arange(2, 6)
        weights = contour_rng.uniform(-1.0, 1.0, size=len(harmonics))
        weights /= max(np.abs(weights).sum(), 1e-12)
        phases = contour_rng.uniform(0.0, 2 * np.pi, size=len(harmonics))
        for k, w, phi in zip(harmonics, weights, phases):
            contour += cell.deformation_amplitude * w * np.cos(k * theta + phi)

    # signed distance to the contour in pixels, negative inside
    distance = (rho - contour) * 0.5 * (cell.radius_a + cell.radius_b)
    alpha = np.clip(0.5 - distance, 0.0, 1.0)
    ring = np.clip(distance + cell.membrane_width + 0.5, 0.0, 1.0) if cell.membrane_width > 0 else np.zeros_like(rho)
    value = cell.interior_brightness + (cell.membrane_brightness - cell.interior_brightness) * ring

    if cell.texture_amplitude > 0:
        texture = gaussian_filter(texture_rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE)), 1.2)
        texture /= max(texture.std(), 1e-12)
        value = value + cell.texture_amplitude * texture * (1.0 - ring)

    premultiplied = alpha * np.clip(value, 0.0, 1.0)
    if cell.blur_sigma > 0:
        alpha = gaussian_filter(alpha, cell.blur_sigma, mode='nearest')
        premultiplied = gaussian_filter(premultiplied, cell.blur_sigma, mode='nearest')
    return alpha, premultiplied


def render(scene, config):
    """
    Render a scene: cells composited over the scaled background, smudges, global blur, additive noise and a clamp to
    [0, 1]. Deterministic in (scene, config).
    :param scene: SceneSpec
    :param config: GeneratorConfig
    :return: 128x128 float32 image
    """
    image = background_image(scene.background_id, config).astype(np.float64) * scene.background_brightness_scale
    image = np.clip(image, 0.0, 1.0)

    for index, cell in enumerate(scene.cells):
        alpha, premultiplied = _cell_layer(cell,
                                           make_rng(scene.seed, STREAM_CONTOUR, index),
                                           make_rng(scene.seed, STREAM_TEXTURE, index))
        image = image * (1.0 - alpha) + premultiplied

    for index, smudge in enumerate(scene.smudges):
        alpha, premultiplied = _cell_layer(smudge, None, None)
        image = image * (1.0 - GEN_SMUDGE_ALPHA * alpha) + GEN_SMUDGE_ALPHA * premultiplied

    if scene.global_blur_sigma > 0:
        image = gaussian_filter(image, scene.global_blur_sigma, mode='nearest')

    if scene.noise_amplitude > 0:
        noise_rng = make_rng(scene.seed, STREAM_NOISE)
        image = image + scene.noise_amplitude * noise_rng.uniform(-1.0, 1.0, size=image.shape)

    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _render_sample(config, seed):
    scene = sample_scene(config, seed)
    return scene, render(scene, config)


def generate_dataset(config, n, seed, out_dir, labeled=None, workers=1, prefix='img', verbose=True):
    """
    Generate n labeled images with their manifest, retained scene specs and the generator configuration. Sample i
    draws from its own stream derived from (seed, i), so the output does not depend on `workers`.
    :param config: GeneratorConfig
    :param n: number of images
    :param seed: dataset seed
    :param out_dir: output directory
    :param labeled: keep the count label on a seeded subset of this many samples only (None keeps all)
    :param workers: number of rendering threads
    :param prefix: image filename prefix
    :param verbose: show a progress bar
    :return: DatasetManifest
    """
    config.validate()
    if n < 1:
        raise ConfigError('n must be > 0')
    if labeled is not None and not 0 <= labeled <= n:
        raise ConfigError('labeled must be in [0, n]')
    os.makedirs(out_dir, exist_ok=True)

    seeds = [derive_seed(seed, i) for i in range(n)]
    width = max(5, len(str(n - 1)))
    filenames = ['%s_%0*d.png' % (prefix, width, i) for i in range(n)]
    keep = set(range(n)) if labeled is None else set(make_rng(seed, STREAM_LABEL_MASK).permutation(n)[:labeled].tolist())

    def _job(i):
        return _render_sample(config, seeds[i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(tqdm(executor.map(_job, range(n)), total=n, desc='Generating', disable=not verbose))
    else:
        results = [_job(i) for i in tqdm(range(n), desc='Generating', disable=not verbose)]

    rows, samples, scenes = [], [], {}
    for i, (scene, image) in enumerate(results):
        write_png(os.path.join(out_dir, filenames[i]), image)
        label = scene.label if i in keep else None
        rows.append({'filename': filenames[i], 'count': '' if label is None else str(label),
                     'domain': config.domain, 'seed': str(seeds[i])})
        samples.append(Sample(image=to_uint8(image).astype(np.float32) / 255.0, label=label,
                              domain=config.domain, id=filenames[i], seed=seeds[i]))
        scenes[filenames[i]] = scene.to_dict()

    manifest_csv = pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(index=False, lineterminator='\n')
    write_file(os.path.join(out_dir, MANIFEST_FILENAME), manifest_csv, quiet=not verbose)
    write_json(os.path.join(out_dir, SCENES_FILENAME), scenes, quiet=not verbose)
    write_json(os.path.join(out_dir, GENERATOR_FILENAME), {'config': config.to_dict(), 'n': n, 'seed': seed,
                                                          'labeled': labeled}, quiet=not verbose)
    return DatasetManifest(samples, out_dir)


def load_scenes(directory):
    """
    Load the retained scene specs of a generated dataset.
    :param directory: dataset directory
    :return: dict filename -> SceneSpec
    """
    from generic import load_config_file
    data = load_config_file(os.path.join(directory, SCENES_FILENAME))
    return {filename: SceneSpec.from_dict(scene) for filename, scene in data.items()}
