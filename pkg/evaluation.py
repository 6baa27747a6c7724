import os
from dataclasses import dataclass, field
from typing import Dict
import numpy as np
import pandas as pd
import simplejson
import torch
import xlsxwriter
from constants import *
from generic import DatasetError, ShapeError, check_image, write_png
from file_output import clean_filename, get_non_existing_filename, write_file, write_json
from twinvae import predict_counts


@dataclass
class CountMetrics:
    mae: float
    mre: float
    accuracy: float
    n: int


@dataclass
class MetricsReport:
    mae: float
    mre: float
    accuracy: float
    n: int
    per_count: Dict[int, CountMetrics] = field(default_factory=dict)

    def to_dict(self, per_count=True):
        """
        JSON form. MRE is a fraction; mre_percent repeats it as a percentage.
        """
        data = {'mae': self.mae, 'mre': self.mre, 'mre_percent': 100.0 * self.mre, 'accuracy': self.accuracy,
                'n': self.n}
        if per_count:
            data['per_count'] = {str(c): {'mae': m.mae, 'mre': m.mre, 'accuracy': m.accuracy, 'n': m.n}
                                 for c, m in sorted(self.per_count.items())}
        return data

    def per_count_table(self):
        """
        :return: DataFrame with the columns count, n, mae, mre, acc sorted by count
        """
        rows = [{'count': c, 'n': m.n, 'mae': m.mae, 'mre': m.mre, 'acc': m.accuracy}
                for c, m in sorted(self.per_count.items())]
        return pd.DataFrame(rows, columns=PER_COUNT_COLUMNS)


def round_half_away(values):
    """
    Round to the nearest integer, halves away from zero.
    """
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def metrics(predictions, labels):
    """
    MAE, MRE (as a fraction) and accuracy of count estimates, with a breakdown per true count.
    :param predictions: real estimates
    :param labels: true counts >= 1
    :return: MetricsReport
    """
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if len(predictions) == 0:
        raise DatasetError('metrics of an empty set are undefined')
    if len(predictions) != len(labels):
        raise ShapeError('got %d predictions for %d labels' % (len(predictions), len(labels)))
    if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
        raise DatasetError('labels must be integer counts')
    if np.any(labels < 1):
        raise DatasetError('labels must be >= 1, the relative error of a count of 0 is undefined')
    if not np.all(np.isfinite(predictions)):
        raise DatasetError('predictions must be finite')

    abs_err = np.abs(predictions - labels)
    rel_err = abs_err / labels
    correct = (round_half_away(predictions) == labels).astype(np.float64)

    per_count = {}
    for c in np.unique(labels):
        sel = labels == c
        per_count[int(c)] = CountMetrics(mae=float(abs_err[sel].mean()), mre=float(rel_err[sel].mean()),
                                         accuracy=float(correct[sel].mean()), n=int(sel.sum()))
    return MetricsReport(mae=float(abs_err.mean()), mre=float(rel_err.mean()), accuracy=float(correct.mean()),
                         n=len(labels), per_count=per_count)


def constant_predictor_mae(labels, constant=None):
    """
    MAE of predicting one constant for every image, by default the mean label.
    :param labels: true counts
    :param constant: the constant estimate
    :return: MAE
    """
    labels = np.asarray(labels, dtype=np.float64)
    if len(labels) == 0:
        raise DatasetError('constant predictor of an empty set is undefined')
    if constant is None:
        constant = labels.mean()
    return float(np.mean(np.abs(labels - constant)))


def evaluate(model, manifest, domain=None, batch_size=256):
    """
    Evaluation mode estimates (z = mu) on every sample of a labeled manifest.
    :param model: TwinVAE
    :param manifest: labeled DatasetManifest
    :param domain: encoder to use, default the manifest's domain
    :param batch_size: images per forward pass
    :return: MetricsReport
    """
    labeled = manifest.labeled()
    if len(labeled) == 0:
        raise DatasetError('evaluation needs labeled samples')
    domain = domain or labeled.domain
    predictions = predict_counts(model, labeled.image_array(), domain, batch_size)
    return metrics(predictions, labeled.labels())


def write_metrics(report, out_dir, quiet=False):
    """
    Write metrics.json and per_count.csv.
    """
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, METRICS_FILENAME), report.to_dict(), quiet=quiet)
    write_file(os.path.join(out_dir, PER_COUNT_FILENAME),
               report.per_count_table().to_csv(index=False, lineterminator='\n'), quiet=quiet)


def plot_per_count(report, output_filename, title=None):
    """
    Offline plotly bar chart of the relative error per true cell count with the mean over all images.
    :param report: MetricsReport
    :param output_filename: HTML file
    :param title: graph title
    :return:
    """
    import plotly
    import plotly.graph_objs as go
    table = report.per_count_table()
    plotly.offline.plot(
        {'data': [go.Bar(x=table['count'], y=100.0 * table['mre'], name='MRE per count', marker={'color': COLOR_NAT},
                         text=['n=%d' % n for n in table['n']]),
                  go.Scatter(x=table['count'], y=[100.0 * report.mre] * len(table), name='mean MRE', mode='lines',
                             line={'color': COLOR_MEAN_BAR, 'dash': 'dash'})],
         'layout': go.Layout(title=title or 'Relative error per cell count (MAE %.3f, accuracy %.1f%%)'
                             % (report.mae, 100.0 * report.accuracy),
                             xaxis={'title': 'true cell count', 'dtick': 1}, yaxis={'title': 'MRE [%]'})},
        filename=output_filename, auto_open=False)
    print('File written:   ' + output_filename)


def export_metrics_to_excel(report, output_filename):
    """
    Excel overview with the totals and the per-count table.
    :param report: MetricsReport
    :param output_filename: file name without extension
    :return: the Excel file name
    """
    excel_filename = get_non_existing_filename(output_filename, 'xlsx')
    workbook = xlsxwriter.Workbook(excel_filename)
    worksheet = workbook.add_worksheet('Metrics')

    format_title = workbook.add_format({'align': 'left', 'bold': True, 'font_size': '14'})
    format_bold_left = workbook.add_format({'align': 'left', 'bold': True, 'bg_color': '#dbdbdb'})
    format_number = workbook.add_format({'num_format': '0.0000'})
    format_percent = workbook.add_format({'num_format': '0.00%'})

    worksheet.write(0, 0, 'Cell count metrics', format_title)
    worksheet.write(2, 0, 'MAE')
    worksheet.write(2, 1, report.mae, format_number)
    worksheet.write(3, 0, 'MRE')
    worksheet.write(3, 1, report.mre, format_percent)
    worksheet.write(4, 0, 'Accuracy')
    worksheet.write(4, 1, report.accuracy, format_percent)
    worksheet.write(5, 0, 'Images')
    worksheet.write(5, 1, report.n)

    y = 7
    for x, column in enumerate(PER_COUNT_COLUMNS):
        worksheet.write(y, x, column, format_bold_left)
    for row in report.per_count_table().itertuples(index=False):
        y += 1
        worksheet.write(y, 0, row.count)
        worksheet.write(y, 1, row.n)
        worksheet.write(y, 2, row.mae, format_number)
        worksheet.write(y, 3, row.mre, format_percent)
        worksheet.write(y, 4, row.acc, format_percent)
    worksheet.set_column(0, 4, 14)
    workbook.close()
    print('File written:   ' + excel_filename)
    return excel_filename


@dataclass
class TranslationResult:
    source: np.ndarray
    source_domain: str
    target_domain: str
    translated: np.ndarray
    source_count_estimate: float
    translated_count_estimate: float


def translate(model, image, source_domain, target_domain):
    """
    Encode with the source encoder, decode the mean latent with the target decoder and re-encode the translation with
    the target encoder. Equal domains give the plain reconstruction.
    :param model: TwinVAE
    :param image: 128x128 image
    :param source_domain: 'nat' or 'syn'
    :param target_domain: 'nat' or 'syn'
    :return: TranslationResult
    """
    source = check_image(image, 'source image')
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            mu = model.encode(source[None], source_domain).mu
            translated = model.decode(mu, target_domain)
            source_estimate = float(model.regress(mu).clamp(min=0.0)[0])
            mu_back = model.encode(translated, target_domain).mu
            translated_estimate = float(model.regress(mu_back).clamp(min=0.0)[0])
    finally:
        model.train(was_training)
    return TranslationResult(source=source,
                             source_domain=source_domain,
                             target_domain=target_domain,
                             translated=translated[0, 0].double().cpu().numpy().astype(np.float32),
                             source_count_estimate=source_estimate,
                             translated_count_estimate=translated_estimate)


def save_translation(result, out_dir, sample_id):
    """
    Write <id>.src.png and <id>.xlat.png and return the JSON line record of the translation.
    :param result: TranslationResult
    :param out_dir: output directory
    :param sample_id: image id, a trailing .png is dropped
    :return: dict
    """
    os.makedirs(out_dir, exist_ok=True)
    stem = clean_filename(sample_id[:-4] if sample_id.lower().endswith('.png') else sample_id)
    write_png(os.path.join(out_dir, stem + '.src.png'), result.source)
    write_png(os.path.join(out_dir, stem + '.xlat.png'), result.translated)
    return {'id': stem,
            'source_domain': result.source_domain,
            'target_domain': result.target_domain,
            'source_count_estimate': result.source_count_estimate,
            'translated_count_estimate': result.translated_count_estimate}


def write_translation_records(records, filename, quiet=False):
    """
    Write translation records as JSON lines.
    """
    content = ''.join(simplejson.dumps(r, sort_keys=True) + '\n' for r in records)
    return write_file(filename, content, quiet=quiet)


def latent_table(model, manifest, batch_size=256):
    """
    Evaluation mode mean latent of every sample, encoded with the encoder of the sample's domain.
    :param model: TwinVAE
    :param manifest: DatasetManifest, labels optional
    :param batch_size: images per forward pass
    :return: DataFrame with the columns id, domain, count, z0..z{latent_dim - 1}
    """
    latent_dim = model.config.latent_dim
    vectors = np.zeros((len(manifest), latent_dim), dtype=np.float64)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for domain in manifest.domains:
                indices = [i for i, s in enumerate(manifest) if s.domain == domain]
                for start in range(0, len(indices), batch_size):
                    chunk = indices[start:start + batch_size]
                    images = np.stack([manifest[i].image for i in chunk])
                    vectors[chunk] = model.encode(images, domain).mu.double().cpu().numpy()
    finally:
        model.train(was_training)

    table = pd.DataFrame({'id': [s.id for s in manifest],
                          'domain': [s.domain for s in manifest],
                          'count': ['' if s.label is None else str(s.label) for s in manifest]})
    z = pd.DataFrame(vectors, columns=['z%d' % i for i in range(latent_dim)])
    return pd.concat([table, z], axis=1)


def export_latents(model, manifest, path, batch_size=256, quiet=False):
    """
    Write the latent dump CSV: header id,domain,count,z0..; the count is empty for unlabeled samples.
    :return: the path
    """
    table = latent_table(model, manifest, batch_size)
    return write_file(path, table.to_csv(index=False, float_format='%.9g', lineterminator='\n'), quiet=quiet)
