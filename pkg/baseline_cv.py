import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import List
import numpy as np
import pandas as pd
import xlsxwriter
from scipy import ndimage
from skimage.feature import peak_local_max
from skimage.segmentation import relabel_sequential, watershed
from tqdm import tqdm
from constants import *
from generic import ConfigError, DatasetError, check_image, dataclass_from_dict, dataclass_to_dict
from file_output import get_non_existing_filename, write_file, write_json
from evaluation import metrics


@dataclass
class WatershedParams:
    crop_margin: int = 0
    blur_kernel: int = 3
    threshold: float = 0.55
    polarity: str = POLARITY_BRIGHT
    distance_peak_min: int = 4
    min_region_area: int = 12

    def validate(self):
        if not 0 <= self.crop_margin < IMAGE_SIZE // 2:
            raise ConfigError('crop_margin must be in [0, %d)' % (IMAGE_SIZE // 2))
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError('blur_kernel must be odd and >= 1, got %s' % self.blur_kernel)
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError('threshold must be in [0, 1], got %s' % self.threshold)
        if self.polarity not in [POLARITY_BRIGHT, POLARITY_DARK]:
            raise ConfigError("polarity must be '%s' or '%s'" % (POLARITY_BRIGHT, POLARITY_DARK))
        if self.distance_peak_min < 1:
            raise ConfigError('distance_peak_min must be >= 1')
        if self.min_region_area < 0:
            raise ConfigError('min_region_area must be >= 0')
        return self

    def as_tuple(self):
        return tuple(getattr(self, name) for name in WATERSHED_FIELDS)

    def to_dict(self):
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return dataclass_from_dict(cls, data, 'watershed')

    @classmethod
    def for_style(cls, style):
        """
        Calibrated defaults of a generator style.
        """
        if style not in WATERSHED_DEFAULTS:
            raise ConfigError("Unknown style '%s'" % style)
        return cls(**WATERSHED_DEFAULTS[style])


@dataclass
class GridSpec:
    crop_margin: List[int] = field(default_factory=lambda: list(WATERSHED_DEFAULT_GRID['crop_margin']))
    blur_kernel: List[int] = field(default_factory=lambda: list(WATERSHED_DEFAULT_GRID['blur_kernel']))
    threshold: List[float] = field(default_factory=lambda: list(WATERSHED_DEFAULT_GRID['threshold']))
    polarity: List[str] = field(default_factory=lambda: list(WATERSHED_DEFAULT_GRID['polarity']))
    distance_peak_min: List[int] = field(default_factory=lambda: list(WATERSHED_DEFAULT_GRID['distance_peak_min']))
    min_region_area: List[int] = field(default_factory=lambda: list(WATERSHED_DEFAULT_GRID['min_region_area']))

    @property
    def size(self):
        size = 1
        for f in fields(self):
            size *= len(getattr(self, f.name))
        return size

    def validate(self):
        for name in WATERSHED_FIELDS:
            if len(getattr(self, name)) == 0:
                raise ConfigError("grid candidate list '%s' is empty" % name)
        for params in self.points():
            params.validate()
        return self

    def points(self):
        """
        Every grid point in deterministic grid order.
        :return: list of WatershedParams
        """
        lists = [getattr(self, name) for name in WATERSHED_FIELDS]
        return [WatershedParams(**dict(zip(WATERSHED_FIELDS, values))) for values in itertools.product(*lists)]

    @classmethod
    def single(cls, params):
        return cls(**{name: [getattr(params, name)] for name in WATERSHED_FIELDS})

    def to_dict(self):
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return dataclass_from_dict(cls, data, 'grid')


def _markers(distance, components, n_components, min_distance):
    peaks = peak_local_max(distance, min_distance=min_distance, labels=components, exclude_border=False)
    peak_mask = np.zeros(distance.shape, dtype=bool)
    if len(peaks):
        peak_mask[tuple(peaks.T)] = True
    # every connected component gets at least one marker: its distance maximum
    covered = set(np.unique(components[peak_mask]).tolist())
    for index in range(1, n_components + 1):
        if index not in covered:
            position = ndimage.maximum_position(distance, components, index)
            peak_mask[position] = True
    markers, _ = ndimage.label(peak_mask, structure=np.ones((3, 3)))
    return markers


def segment(image, params):
    """
    Crop, mean blur, threshold by polarity, fill holes, distance transform, distance maxima as markers, marker-based
    watershed and removal of small regions.
    :param image: 128x128 image in [0, 1]
    :param params: WatershedParams
    :return: 128x128 int32 label map, 0 is background
    """
    image = check_image(image)
    m = params.crop_margin
    crop = image[m:IMAGE_SIZE - m, m:IMAGE_SIZE - m].astype(np.float64)

    blurred = ndimage.uniform_filter(crop, size=params.blur_kernel, mode='nearest') if params.blur_kernel > 1 else crop
    if params.polarity == POLARITY_BRIGHT:
        mask = blurred >= params.threshold
    else:
        mask = blurred <= params.threshold
    # phase-contrast membranes form rings
    mask = ndimage.binary_fill_holes(mask)

    labels = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.int32)
    if not mask.any():
        return labels

    # the crop border counts as background for the distance transform
    distance = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    components, n_components = ndimage.label(mask)
    markers = _markers(distance, components, n_components, params.distance_peak_min)
    regions = watershed(-distance, markers, mask=mask)

    if params.min_region_area > 0:
        areas = np.bincount(regions.ravel())
        small = np.flatnonzero(areas < params.min_region_area)
        regions[np.isin(regions, small[small > 0])] = 0
    regions, _, _ = relabel_sequential(regions)
    labels[m:IMAGE_SIZE - m, m:IMAGE_SIZE - m] = regions
    return labels


def count(image, params):
    """
    :return: the number of regions surviving the segmentation
    """
    return int(segment(image, params).max())


@dataclass
class GridResult:
    best_params: WatershedParams
    best_report: object
    table: pd.DataFrame


def _evaluate_point(params, images, labels):
    predictions = np.array([count(image, params) for image in images], dtype=np.float64)
    return metrics(predictions, labels)


def grid_search(manifest, grid, workers=1, verbose=True):
    """
    Exhaustive grid search. The best point has the lowest MAE, ties are broken by the higher accuracy and then by the
    lexicographic order of the parameter values.
    :param manifest: labeled DatasetManifest
    :param grid: GridSpec
    :param workers: number of threads evaluating grid points
    :param verbose: report the grid size and show a progress bar
    :return: GridResult with a table holding one row per grid point in grid order
    """
    grid.validate()
    labeled = manifest.labeled()
    if len(labeled) == 0:
        raise DatasetError('grid search needs a non-empty labeled dataset')
    if len(labeled) != len(manifest):
        raise DatasetError('grid search needs every sample to be labeled')
    images = [s.image for s in labeled]
    labels = labeled.labels()
    points = grid.points()
    if verbose:
        print('Grid search over %d parameter combinations on %d images' % (len(points), len(images)))

    def _job(params):
        return _evaluate_point(params, images, labels)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            reports = list(tqdm(executor.map(_job, points), total=len(points), desc='Grid search',
                                disable=not verbose))
    else:
        reports = [_job(p) for p in tqdm(points, desc='Grid search', disable=not verbose)]

    rows = []
    for params, report in zip(points, reports):
        row = params.to_dict()
        row.update({'mae': report.mae, 'mre': report.mre, 'acc': report.accuracy})
        rows.append(row)
    table = pd.DataFrame(rows, columns=WATERSHED_FIELDS + ['mae', 'mre', 'acc'])

    best = min(range(len(points)), key=lambda i: (reports[i].mae, -reports[i].accuracy, points[i].as_tuple()))
    return GridResult(best_params=points[best], best_report=reports[best], table=table)


def export_grid_to_excel(table, output_filename):
    """
    Write the grid search table to an Excel sheet with the best rows highlighted.
    :param table: DataFrame from grid_search
    :param output_filename: file name without extension
    :return: the Excel file name
    """
    excel_filename = get_non_existing_filename(output_filename, 'xlsx')
    workbook = xlsxwriter.Workbook(excel_filename)
    worksheet = workbook.add_worksheet('Grid search')

    format_bold_left = workbook.add_format({'align': 'left', 'bold': True, 'bg_color': '#dbdbdb'})
    format_number = workbook.add_format({'num_format': '0.0000'})
    format_percent = workbook.add_format({'num_format': '0.00%'})
    format_best = workbook.add_format({'bg_color': '#8bc34a', 'num_format': '0.0000'})

    columns = list(table.columns)
    for x, column in enumerate(columns):
        worksheet.write(0, x, column, format_bold_left)
    best_mae = table['mae'].min() if len(table) else None
    for y, row in enumerate(table.itertuples(index=False), start=1):
        for x, (column, value) in enumerate(zip(columns, row)):
            if column in ['mre', 'acc']:
                worksheet.write(y, x, value, format_percent)
            elif column == 'mae':
                worksheet.write(y, x, value, format_best if value == best_mae else format_number)
            else:
                worksheet.write(y, x, value)

    worksheet.autofilter(0, 0, len(table), len(columns) - 1)
    worksheet.freeze_panes(1, 0)
    worksheet.set_column(0, len(columns) - 1, 16)
    workbook.close()
    print('File written:   ' + excel_filename)
    return excel_filename


def write_grid_results(result, out_dir, excel=True, quiet=False):
    """
    Write grid_results.csv, best_params.json and optionally an Excel sheet.
    :param result: GridResult
    :param out_dir: output directory
    :param excel: also write the Excel sheet
    :param quiet: do not print the 'File written' lines
    :return:
    """
    os.makedirs(out_dir, exist_ok=True)
    write_file(os.path.join(out_dir, GRID_RESULTS_FILENAME), result.table.to_csv(index=False, lineterminator='\n'),
               quiet=quiet)
    write_json(os.path.join(out_dir, GRID_BEST_FILENAME),
               {'params': result.best_params.to_dict(), 'metrics': result.best_report.to_dict(per_count=False)},
               quiet=quiet)
    if excel:
        export_grid_to_excel(result.table, os.path.join(out_dir, GRID_EXCEL_FILENAME))
