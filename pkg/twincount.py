import argparse
import dataclasses
import os
import signal
import sys
from logging import getLogger, ERROR as LOGERROR
from constants import *
from generic import TwinCountError, VALIDATION_ERRORS, ConfigError, resolve_seed
from file_output import RunDirectoryLock, write_run_record
from health import check_config_file_health
getLogger('PIL').setLevel(LOGERROR)


class _UsageError(Exception):
    pass


class _MenuParser(argparse.ArgumentParser):
    """
    ArgumentParser which reports usage errors to main() instead of exiting.
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError('%s: error: %s' % (self.prog, message))


def _add_common_arguments(parser, out_required=True):
    parser.add_argument('-c', '--config', help='path to the JSON or YAML run configuration file')
    parser.add_argument('-s', '--seed', type=int, help='seed of the run (default: the config seed, then the '
                                                       'environment variable %s, then 0)' % ENV_SEED)
    parser.add_argument('-o', '--out', help='output directory of the run', required=out_required)
    parser.add_argument('--health', help='check the configuration file for errors and exit', action='store_true')


def _init_menu():
    """
    Initialise the command line parameter menu.
    :return:
    """
    menu_parser = _MenuParser(description=APP_DESC)
    menu_parser.add_argument('--version', action='version', version='%(prog)s ' + VERSION)

    # add subparsers
    subparsers = menu_parser.add_subparsers(title='MODE',
                                            description='Select the mode to use. Every mode has its own arguments and '
                                                        'help info displayed using: {generate, train, evaluate, '
                                                        'baseline, hpo, translate, embed} --help', metavar='',
                                            dest='subparser')

    parser_generate = subparsers.add_parser('generate', aliases=['gen'], help='generate a synthetic dataset',
                                            description='Render labeled synthetic microscopy images with a manifest '
                                                        'and the scene specs of every image.')
    _add_common_arguments(parser_generate, out_required=False)
    parser_generate.add_argument('-n', type=int, help='number of images', required=True)
    parser_generate.add_argument('--style', choices=STYLES, help='generator style (overrides the config)')
    parser_generate.add_argument('--labeled', type=int, help='keep the count label on a seeded subset of this many '
                                                             'images only')
    parser_generate.add_argument('-w', '--workers', type=int, default=1, help='number of rendering threads')

    parser_train = subparsers.add_parser('train', aliases=['tr'], help='train a twin VAE',
                                         description='Train a twin VAE on a natural and an optional synthetic '
                                                     'dataset. Logs, checkpoints and a loss graph go to the run '
                                                     'directory.')
    _add_common_arguments(parser_train, out_required=False)
    parser_train.add_argument('--nat', help='natural dataset directory (labels optional)')
    parser_train.add_argument('--syn', help='labeled synthetic dataset directory; leave out for natural-only '
                                            'training')
    parser_train.add_argument('-p', '--preset', choices=sorted(PRESETS), help='published training regime: pc '
                                                                              '(MSE + Adam, batch 128) or bf (BCE '
                                                                              '+ RAdam, batch 64)')
    parser_train.add_argument('--max-epochs', type=int, help='maximum number of epochs (overrides the config)')
    parser_train.add_argument('--resume', help='checkpoint to resume the run from')

    parser_evaluate = subparsers.add_parser('evaluate', aliases=['ev'], help='evaluate a checkpoint',
                                            description='Count metrics of a checkpoint on a labeled dataset, '
                                                        'overall and per true cell count.')
    _add_common_arguments(parser_evaluate)
    parser_evaluate.add_argument('-k', '--checkpoint', help='model checkpoint', required=True)
    parser_evaluate.add_argument('-d', '--data', help='labeled dataset directory', required=True)
    parser_evaluate.add_argument('--domain', choices=DOMAINS, help='encoder to use (default: the dataset\'s domain)')
    parser_evaluate.add_argument('-g', '--graph', help='generate a graph with the error per cell count',
                                 action='store_true')
    parser_evaluate.add_argument('-e', '--excel', help='generate an Excel sheet with the metrics',
                                 action='store_true')

    parser_baseline = subparsers.add_parser('baseline', aliases=['cv'], help='watershed counting baseline',
                                            description='Count cells with a watershed segmentation. With a grid '
                                                        'file every parameter combination is evaluated and the best '
                                                        'one is reported.')
    _add_common_arguments(parser_baseline)
    parser_baseline.add_argument('-d', '--data', help='labeled dataset directory', required=True)
    parser_baseline.add_argument('--grid', help='JSON or YAML file with the candidate values per parameter')
    parser_baseline.add_argument('--style', choices=STYLES, help='use the calibrated parameters of a style '
                                                                 'instead of the config\'s watershed section')
    parser_baseline.add_argument('-w', '--workers', type=int, default=1, help='number of threads')
    parser_baseline.add_argument('-e', '--excel', help='generate an Excel sheet with the grid results',
                                 action='store_true')

    parser_hpo = subparsers.add_parser('hpo', aliases=['bo'], help='Bayesian hyperparameter search',
                                       description='Search the hyperparameters of the twin VAE with a Gaussian '
                                                   'process and expected improvement. The history file of the run '
                                                   'directory is resumed when it exists.')
    _add_common_arguments(parser_hpo, out_required=False)
    parser_hpo.add_argument('--nat', help='natural dataset directory')
    parser_hpo.add_argument('--syn', help='labeled synthetic dataset directory')
    parser_hpo.add_argument('-b', '--budget', type=int, help='number of trials (overrides the config)')
    parser_hpo.add_argument('--search-epochs', type=int, help='training epochs per trial (overrides the config)')
    parser_hpo.add_argument('-w', '--workers', type=int, help='trials evaluated concurrently (overrides the config)')

    parser_translate = subparsers.add_parser('translate', aliases=['xl'], help='translate images between domains',
                                             description='Encode images with the encoder of their domain and decode '
                                                         'them with the decoder of the other domain.')
    _add_common_arguments(parser_translate)
    parser_translate.add_argument('-k', '--checkpoint', help='model checkpoint', required=True)
    parser_translate.add_argument('-d', '--data', help='dataset directory', required=True)
    parser_translate.add_argument('--to', choices=DOMAINS, help='target domain', required=True)
    parser_translate.add_argument('--limit', type=int, help='translate only the first N images')

    parser_embed = subparsers.add_parser('embed', aliases=['em'], help='export the latent vectors',
                                         description='Write the mean latent vector of every image to a CSV file.')
    _add_common_arguments(parser_embed)
    parser_embed.add_argument('-k', '--checkpoint', help='model checkpoint', required=True)
    parser_embed.add_argument('-d', '--data', help='dataset directory; repeat the argument for more directories',
                              action='append', required=True)

    return menu_parser


def _load_config(args):
    from run_config import load_run_config
    config = load_run_config(args.config)
    config.seed = resolve_seed(args.seed, config.seed)
    return config


def _required_path(value, config_value, name):
    path = value or config_value
    if not path:
        raise ConfigError("missing %s: give '--%s' or set 'paths.%s' in the configuration" % (name, name, name))
    return path


def _generate(args, config):
    from synthgen import generate_dataset
    if args.style:
        # the style specific ranges follow the new style
        config.generator = dataclasses.replace(config.generator, style=args.style, interior_range=None,
                                               membrane_range=None, brightness_scale_range=None,
                                               deformation_range=None, texture_range=None, smudge_count_range=None)
    out = _required_path(args.out, config.paths.out or config.paths.data, 'out')
    config.validate()
    with RunDirectoryLock(out):
        write_run_record(out, 'generate', config.to_dict(), config.seed)
        manifest = generate_dataset(config.generator, args.n, config.seed, out, labeled=args.labeled,
                                    workers=args.workers)
    labeled = len(manifest.labeled())
    print('Generated %d %s images (%d labeled) in %s' % (len(manifest), config.generator.style, labeled, out))


def _train(args, config):
    from dataio import load_dataset
    from training import apply_preset, train
    train_config = config.train_config(config.seed)
    if args.preset:
        apply_preset(train_config, args.preset)
    if args.max_epochs is not None:
        train_config.max_epochs = args.max_epochs
        train_config.regressor_start_epoch = min(train_config.regressor_start_epoch, args.max_epochs)
    config.validate()
    nat = load_dataset(_required_path(args.nat, config.paths.nat, 'nat'))
    syn_path = args.syn or config.paths.syn
    syn = load_dataset(syn_path, labeled_required=True) if syn_path else None

    out = _required_path(args.out, config.paths.out, 'out')
    with RunDirectoryLock(out):
        write_run_record(out, 'train', config.to_dict(), config.seed)
        result = train(config.model, train_config, nat, syn, run_dir=out, resume_from=args.resume)
    best = 'none' if result.best_epoch is None else '%d (validation loss %.6g)' % (result.best_epoch,
                                                                                   result.best_val_total)
    print('Trained %d epochs%s, best epoch %s, run directory %s'
          % (result.epochs_run, ' (stopped early)' if result.stopped_early else '', best, out))


def _evaluate(args, config):
    from dataio import load_dataset
    from evaluation import evaluate, write_metrics, plot_per_count, export_metrics_to_excel
    from twinvae import load_checkpoint
    manifest = load_dataset(args.data, labeled_required=True)
    model, _ = load_checkpoint(args.checkpoint)
    with RunDirectoryLock(args.out):
        write_run_record(args.out, 'evaluate', config.to_dict(), config.seed)
        report = evaluate(model, manifest, args.domain)
        write_metrics(report, args.out)
        if args.graph:
            plot_per_count(report, os.path.join(args.out, PER_COUNT_GRAPH_FILENAME))
        if args.excel:
            export_metrics_to_excel(report, os.path.join(args.out, 'metrics'))
    print('MAE %.4f, MRE %.2f%%, accuracy %.2f%% on %d images'
          % (report.mae, 100.0 * report.mre, 100.0 * report.accuracy, report.n))


def _baseline(args, config):
    from dataio import load_dataset
    from baseline_cv import GridSpec, WatershedParams, grid_search, write_grid_results
    from generic import load_config_file
    if args.grid:
        grid = GridSpec.from_dict(load_config_file(args.grid))
    elif args.style:
        grid = GridSpec.single(WatershedParams.for_style(args.style))
    elif config.paths.grid:
        grid = GridSpec.from_dict(load_config_file(config.paths.grid))
    else:
        grid = GridSpec.single(config.watershed)
    grid.validate()
    manifest = load_dataset(args.data, labeled_required=True)
    with RunDirectoryLock(args.out):
        write_run_record(args.out, 'baseline', {'run': config.to_dict(), 'grid': grid.to_dict()}, config.seed)
        result = grid_search(manifest, grid, workers=args.workers)
        write_grid_results(result, args.out, excel=args.excel)
    report = result.best_report
    print('Best of %d parameter combinations: MAE %.4f, MRE %.2f%%, accuracy %.2f%%'
          % (grid.size, report.mae, 100.0 * report.mre, 100.0 * report.accuracy))


def _hpo(args, config):
    from dataio import load_dataset
    from hyperopt import run_search, training_objective, write_best_trial
    if args.budget is not None:
        config.hpo.budget = args.budget
    if args.search_epochs is not None:
        config.hpo.search_epochs = args.search_epochs
    if args.workers is not None:
        config.hpo.workers = args.workers
    config.validate()
    nat = load_dataset(_required_path(args.nat, config.paths.nat, 'nat'))
    syn_path = args.syn or config.paths.syn
    syn = load_dataset(syn_path, labeled_required=True) if syn_path else None

    out = _required_path(args.out, config.paths.out, 'out')
    with RunDirectoryLock(out):
        write_run_record(out, 'hpo', config.to_dict(), config.seed)
        objective = training_objective(config.model, config.train_config(config.seed), nat, syn,
                                       search_epochs=config.hpo.search_epochs, run_root=os.path.join(out, 'trials'))
        result = run_search(config.search, config.hpo.budget, objective, seed=config.seed,
                            history_file=os.path.join(out, HPO_HISTORY_FILENAME), workers=config.hpo.workers,
                            n_initial=config.hpo.n_initial)
        write_best_trial(result, os.path.join(out, HPO_BEST_FILENAME))
    print('Best of %d trials: objective %.6g at %s'
          % (len(result.trials), result.best.objective,
             ', '.join('%s=%.4g' % (k, v) for k, v in sorted(result.best.raw_config.items()))))


def _translate(args, config):
    from dataio import load_dataset
    from evaluation import translate, save_translation, write_translation_records
    from twinvae import load_checkpoint
    manifest = load_dataset(args.data)
    if args.limit is not None:
        if args.limit < 1:
            raise ConfigError('limit must be >= 1')
        manifest = manifest.subset(range(min(args.limit, len(manifest))))
    model, _ = load_checkpoint(args.checkpoint)
    records = []
    with RunDirectoryLock(args.out):
        write_run_record(args.out, 'translate', config.to_dict(), config.seed)
        for sample in manifest:
            result = translate(model, sample.image, sample.domain, args.to)
            records.append(save_translation(result, args.out, sample.id))
        write_translation_records(records, os.path.join(args.out, TRANSLATIONS_FILENAME))
    print('Translated %d images to the %s domain in %s' % (len(records), args.to, args.out))


def _embed(args, config):
    from dataio import load_dataset, DatasetManifest
    from evaluation import export_latents
    from twinvae import load_checkpoint
    manifest = DatasetManifest.concat(*[load_dataset(d) for d in args.data])
    model, _ = load_checkpoint(args.checkpoint)
    path = os.path.join(args.out, LATENTS_FILENAME)
    with RunDirectoryLock(args.out):
        write_run_record(args.out, 'embed', config.to_dict(), config.seed)
        export_latents(model, manifest, path)
    print('Exported %d latent vectors of dimension %d to %s' % (len(manifest), model.config.latent_dim, path))


def _menu(menu_parser, argv):
    """
    Parser for the command line parameter menu and calls the appropriate functions.
    :param menu_parser: the argparse menu as created with '_init_menu()'
    :param argv: command line arguments
    :return: exit code
    """
    args = menu_parser.parse_args(argv)

    if args.subparser is None:
        menu_parser.print_help()
        return EXIT_USAGE

    if args.health:
        if not args.config:
            raise _UsageError('--health needs a configuration file (-c, --config)')
        return EXIT_VALIDATION if check_config_file_health(args.config, True) else EXIT_OK
    if args.config and check_config_file_health(args.config, False):
        return EXIT_VALIDATION

    config = _load_config(args)

    if args.subparser in ['generate', 'gen']:
        _generate(args, config)
    elif args.subparser in ['train', 'tr']:
        _train(args, config)
    elif args.subparser in ['evaluate', 'ev']:
        _evaluate(args, config)
    elif args.subparser in ['baseline', 'cv']:
        _baseline(args, config)
    elif args.subparser in ['hpo', 'bo']:
        _hpo(args, config)
    elif args.subparser in ['translate', 'xl']:
        _translate(args, config)
    elif args.subparser in ['embed', 'em']:
        _embed(args, config)
    return EXIT_OK


def main(argv=None):
    """
    Run the command line interface.
    :param argv: command line arguments, default sys.argv[1:]
    :return: exit code: 0 success, 1 usage error, 2 validation error, 3 runtime failure
    """
    menu_parser = _init_menu()
    try:
        return _menu(menu_parser, sys.argv[1:] if argv is None else list(argv))
    except SystemExit as e:
        # --help and --version
        return e.code if isinstance(e.code, int) else EXIT_OK
    except _UsageError as e:
        print('[!] ' + str(e))
        return EXIT_USAGE
    except VALIDATION_ERRORS as e:
        print('[!] ' + str(e))
        return EXIT_VALIDATION
    except (TwinCountError, RuntimeError, OSError, MemoryError) as e:
        print('[!] %s: %s' % (type(e).__name__, e))
        return EXIT_RUNTIME


# pylint: disable=unused-argument
def _signal_handler(signum, frame):
    """
    Function to handles exiting via Ctrl+C.
    :param signum:
    :param frame:
    :return:
    """
    sys.exit(0)


if __name__ == '__main__':
    signal.signal(signal.SIGINT, _signal_handler)
    sys.exit(main())
