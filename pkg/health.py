import dataclasses
from difflib import SequenceMatcher
from constants import *
from generic import ConfigError, TwinCountError, load_config_file


def _print_error_msg(msg, print_error):
    if print_error:
        print(msg)
    return True


def _section_fields():
    """
    Known keys per config section, with the default value of each key (None when the key has no usable default).
    :return: dict section -> dict key -> default
    """
    from run_config import RunConfig
    from hyperopt import Dimension

    config = RunConfig()
    known = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            known[f.name] = {g.name: getattr(value, g.name) for g in dataclasses.fields(value)}
    for nested in ['weights', 'optimizer', 'augmentation', 'seed']:
        known['train'].pop(nested, None)
    known['search'] = {'dimensions': []}
    known['dimension'] = {f.name: (f.default if f.default is not dataclasses.MISSING else None)
                          for f in dataclasses.fields(Dimension)}
    return known


def _check_for_similar_values(value, candidates):
    """
    Find the candidates which are a very close match of the provided value.
    :param value: the (misspelled) value
    :param candidates: known values
    :return: list of close matches
    """
    return [c for c in candidates if SequenceMatcher(None, value, c).ratio() > 0.75]


def _unknown_key_msg(key, location, candidates):
    similar = _check_for_similar_values(str(key), candidates)
    msg = '[!] UNKNOWN key in %s: %s' % (location, key)
    if similar:
        msg += '  (did you mean: %s?)' % ', '.join(similar)
    return msg


def _type_issue(key, value, default, location):
    """
    Compare the type of a value with the type of its default.
    :return: an error message or None
    """
    if value is None or default is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            return '[!] INVALID value for \'%s\' in %s: %s  (should be true or false)' % (key, location, value)
    elif isinstance(default, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return '[!] INVALID value for \'%s\' in %s: %s  (should be a number)' % (key, location, value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            return '[!] INVALID value for \'%s\' in %s: %s  (should be a string)' % (key, location, value)
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            return '[!] INVALID value for \'%s\' in %s: %s  (should be a list of %d values)' \
                   % (key, location, value, len(default))
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            return '[!] INVALID value for \'%s\' in %s: %s  (should be a mapping)' % (key, location, value)
    return None


def check_config_health(config_dict, filename, health_is_called):
    """
    Check on errors in the provided run configuration.
    :param config_dict: content of the configuration file as dict
    :param filename: configuration file location, used in messages
    :param health_is_called: boolean that specifies if detailed errors in the file will be printed to stdout
    :return: list of issues, empty when the configuration is healthy
    """
    from run_config import RunConfig

    issues = []
    if not isinstance(config_dict, dict):
        issues.append('[!] The configuration must be a mapping of sections')
    else:
        known = _section_fields()
        for section, content in config_dict.items():
            if section not in RUN_CONFIG_SECTIONS:
                issues.append(_unknown_key_msg(section, 'the configuration', RUN_CONFIG_SECTIONS))
                continue
            if section in ['version', 'seed']:
                if content is not None and (isinstance(content, bool) or not isinstance(content, (int, float))):
                    issues.append('[!] INVALID value for \'%s\': %s  (should be a number)' % (section, content))
                continue
            if content is None:
                continue
            if not isinstance(content, dict):
                issues.append('[!] Section \'%s\' must be a mapping' % section)
                continue

            for key, value in content.items():
                if section == 'train' and key in ['weights', 'optimizer', 'augmentation', 'seed']:
                    issues.append('[!] \'%s\' is a top-level section, not part of \'train\'' % key)
                elif key not in known[section]:
                    issues.append(_unknown_key_msg(key, 'section \'%s\'' % section, list(known[section])))
                else:
                    issue = _type_issue(key, value, known[section][key], 'section \'%s\'' % section)
                    if issue:
                        issues.append(issue)

            if section == 'search' and isinstance(content.get('dimensions'), list):
                for i, dimension in enumerate(content['dimensions']):
                    location = 'search dimension %d' % (i + 1)
                    if not isinstance(dimension, dict):
                        issues.append('[!] %s must be a mapping' % location)
                        continue
                    for key in ['name', 'low', 'high']:
                        if key not in dimension:
                            issues.append('[!] %s is MISSING the key: %s' % (location, key))
                    for key, value in dimension.items():
                        if key not in known['dimension']:
                            issues.append(_unknown_key_msg(key, location, list(known['dimension'])))

        # range checks are done by the config sections themselves
        if not issues:
            try:
                RunConfig.from_dict(config_dict).validate()
            except TwinCountError as e:
                issues.append('[!] ' + str(e))

    for issue in issues:
        _print_error_msg(issue, health_is_called)
    if issues and not health_is_called:
        print(HEALTH_ERROR_TXT + str(filename))
    return issues


def check_config_file_health(filename, health_is_called):
    """
    Check on errors in the provided JSON or YAML configuration file.
    :param filename: configuration file location
    :param health_is_called: boolean that specifies if detailed errors in the file will be printed to stdout
    :return: list of issues
    """
    try:
        config_dict = load_config_file(filename)
    except ConfigError as e:
        _print_error_msg('[!] ' + str(e), True)
        return ['[!] ' + str(e)]
    issues = check_config_health(config_dict, filename, health_is_called)
    if health_is_called and not issues:
        print('No errors found in: ' + str(filename))
    return issues
