import os
import sys
import tempfile
import simplejson
from datetime import datetime
from constants import *
from generic import RunLockedError, dumps_json


def clean_filename(filename):
    """
    Remove invalid characters from filename and maximize it to 200 characters
    :param filename: Input filename
    :return: sanitized filename
    """
    return filename.replace('/', '').replace('\\', '').replace(':', '')[:200]


def write_file(filename, content, binary=False, quiet=False):
    """
    Writes content to a file atomically: the content goes to a temporary file in the same directory which is then
    renamed over the target, so readers never see a partially written file.
    :param filename: target path
    :param content: str or bytes
    :param binary: write bytes instead of text
    :param quiet: do not print the 'File written' line
    :return: the filename
    """
    directory = os.path.dirname(os.path.abspath(filename))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_filename = tempfile.mkstemp(dir=directory, prefix='.' + os.path.basename(filename) + '.', suffix='.tmp')
    try:
        if binary:
            with os.fdopen(fd, 'wb') as f:
                f.write(content)
        else:
            with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
                f.write(content)
        os.replace(tmp_filename, filename)
    except BaseException:
        if os.path.exists(tmp_filename):
            os.remove(tmp_filename)
        raise

    if not quiet:
        print('File written:   ' + str(filename))
    return filename


def write_json(filename, obj, quiet=False):
    """
    Write an object as canonical JSON (sorted keys, indent 2).
    :param filename: target path
    :param obj: JSON serializable object
    :param quiet: do not print the 'File written' line
    :return: the filename
    """
    return write_file(filename, dumps_json(obj), quiet=quiet)


def append_json_line(filename, obj):
    """
    Append one JSON object as a line to a JSON-lines file and flush it to disk.
    :param filename: target path
    :param obj: JSON serializable object
    :return:
    """
    directory = os.path.dirname(os.path.abspath(filename))
    os.makedirs(directory, exist_ok=True)
    with open(filename, 'a', encoding='utf-8', newline='\n') as f:
        f.write(simplejson.dumps(obj, sort_keys=True, ignore_nan=True) + '\n')
        f.flush()
        os.fsync(f.fileno())


def get_non_existing_filename(filename, extension):
    """
    Generates a filename that doesn't exist based on the given filename by appending a number as suffix.
    :param filename:
    :param extension:
    :return:
    """
    if filename.endswith('.' + extension):
        filename = filename[:-len('.' + extension)]
    if os.path.exists('%s.%s' % (filename, extension)):
        suffix = 1
        while os.path.exists('%s_%s.%s' % (filename, suffix, extension)):
            suffix += 1
        output_filename = '%s_%s.%s' % (filename, suffix, extension)
    else:
        output_filename = '%s.%s' % (filename, extension)
    return output_filename


def write_run_record(run_dir, command, config, seed, argv=None):
    """
    Write the run.json provenance record of a run directory.
    :param run_dir: the run directory
    :param command: the subcommand that produced the run
    :param config: the resolved configuration as dict
    :param seed: the resolved seed
    :param argv: command line arguments
    :return: the filename
    """
    record = {'app': APP_NAME,
              'version': VERSION,
              'command': command,
              'argv': list(argv) if argv is not None else list(sys.argv[1:]),
              'seed': seed,
              'config': config,
              'created': datetime.now().isoformat(timespec='seconds')}
    return write_json(os.path.join(run_dir, RUN_RECORD_FILENAME), record)


class RunDirectoryLock:
    """
    Exclusive lock on a run directory, held through a lock file created with O_EXCL.
    """

    def __init__(self, run_dir):
        self.run_dir = run_dir
        self.lock_file = os.path.join(run_dir, RUN_LOCK_FILENAME)
        self._fd = None

    def acquire(self):
        os.makedirs(self.run_dir, exist_ok=True)
        try:
            self._fd = os.open(self.lock_file, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError('Run directory is in use by another process (remove %s if it is stale)' % self.lock_file)
        os.write(self._fd, str(os.getpid()).encode('ascii'))
        return self

    def release(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
            if os.path.exists(self.lock_file):
                os.remove(self.lock_file)

    def __enter__(self):
        return self.acquire()

    def __exit__(self, exc_type, exc, tb):
        self.release()
        return False
