"""Runtime settings and experiment configuration.

Runtime settings (worker count, log level) cascade from YAML files and
environment variables through :func:`load_configuration`.  Experiments are
described by flat ``key = value`` files parsed into an
:class:`ExperimentConfig`.
"""
import os
import logging
from collections import OrderedDict
from dataclasses import dataclass, field, fields

import yaml

from .bench import BenchConfig
from .gating import GateConfig, PoolConfig
from .head import BackboneConfig, HeadConfig
from .selection import RsnConfig

logger = logging.getLogger(__name__)


class ConfigKeyError(KeyError):
    pass


class ConfigValueError(ValueError):
    pass


def load_configuration(name, prefix, defaults):
    """
    Load runtime settings from a cascading series of locations.

    The precedence order is (highest priority last):

    1. ``defaults``
    2. The conda environment
       - CONDA_ETC_/{name}.yml (if CONDA_ETC_ is defined for the env)
    3. At the system level
       - /etc/{name}.yml
    4. In the user's home directory
       - ~/.config/{name}/{name}.yml
    5. Environmental variables
       - {PREFIX}_{FIELD}

    Parameters
    ----------
    name : str
        The expected base-name of the configuration files

    prefix : str
        The prefix when looking for environmental variables

    defaults : dict
        Field names and default values; environment values are cast to
        the type of the default

    Returns
    ------
    conf : dict
        Dictionary keyed on the fields of ``defaults``
    """
    filenames = [
        os.path.join('/etc', name + '.yml'),
        os.path.join(os.path.expanduser('~'), '.config', name,
                     name + '.yml'),
        ]

    if 'CONDA_ETC_' in os.environ:
        filenames.insert(0, os.path.join(
            os.environ['CONDA_ETC_'], name + '.yml'))

    config = dict(defaults)
    for filename in filenames:
        if os.path.isfile(filename):
            with open(filename) as f:
                config.update(yaml.safe_load(f) or {})
            logger.debug("Using settings from config file %s. \n%r",
                         filename, config)

    for key, default in defaults.items():
        var_name = prefix + '_' + key.upper().replace(' ', '_')
        if var_name in os.environ:
            value = os.environ[var_name]
            try:
                config[key] = type(default)(value)
            except ValueError:
                raise ConfigValueError("{}={!r} is not a valid {}".format(
                    var_name, value, type(default).__name__))
    return config


runtime_config = load_configuration(
    'regionlets', 'REGIONLET', {'threads': 1, 'log_level': 'INFO'})


# experiment configuration ###################################################

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    momentum: float = 0.9
    schedule: tuple = ((0, 0.01), (800, 0.001))
    seed: int = 0
    output_dir: str = 'runs/default'
    map_subset: int = 40

    def __post_init__(self):
        self.schedule = tuple((int(i), float(lr)) for i, lr in self.schedule)
        if not self.schedule or self.schedule[0][0] != 0:
            raise ValueError("train.schedule must start at iteration 0")
        steps = [i for i, _ in self.schedule]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("train.schedule iterations must be strictly "
                             "increasing, got {}".format(steps))
        if any(not lr > 0 for _, lr in self.schedule):
            raise ValueError("train.schedule learning rates must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need train.epochs >= 0 and train.batch_size "
                             ">= 1")

    def lr_at(self, iteration):
        """Learning rate in effect at ``iteration`` (counted from 0)"""
        lr = self.schedule[0][1]
        for start, value in self.schedule:
            if iteration >= start:
                lr = value
        return lr


def _parse_shape(text):
    try:
        height, width = (int(v) for v in str(text).lower().split('x'))
    except ValueError:
        raise ConfigValueError("expected HxW, got {!r}".format(text))
    return height, width


def _format_shape(value):
    return '{}x{}'.format(*value)


def _parse_ints(text):
    items = str(text).strip().strip('[]()').split(',')
    try:
        return tuple(int(v) for v in items if v.strip())
    except ValueError:
        raise ConfigValueError("expected a list of integers, got {!r}"
                               .format(text))


def _format_ints(value):
    return '[' + ','.join(str(v) for v in value) + ']'


def _parse_schedule(text):
    # parsed by hand: YAML reads 0:0.01 as a base-60 number
    steps = []
    for item in str(text).split(','):
        try:
            start, lr = item.split(':')
            steps.append((int(start), float(lr)))
        except ValueError:
            raise ConfigValueError("expected 'iteration:lr, ...', got {!r}"
                                   .format(text))
    return tuple(steps)


def _format_schedule(value):
    return ', '.join('{}:{!r}'.format(i, lr) for i, lr in value)


def _parse_scalar(text):
    return yaml.safe_load(text)


def _format_scalar(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return repr(value) if isinstance(value, float) else str(value)


_SECTIONS = OrderedDict([
    ('backbone', BackboneConfig), ('rsn', RsnConfig), ('gate', GateConfig),
    ('pool', PoolConfig), ('head', HeadConfig), ('bench', BenchConfig),
    ('train', TrainConfig)])

# keys whose values are not plain YAML scalars
_PARSERS = {'backbone.channels': (_parse_ints, _format_ints),
            'pool.out': (_parse_shape, _format_shape),
            'head.density': (_parse_shape, _format_shape),
            'train.schedule': (_parse_schedule, _format_schedule)}


def _key_table():
    table = OrderedDict()
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if section == 'pool' and f.name in ('out_h', 'out_w'):
                if f.name == 'out_h':
                    table['pool.out'] = (section, ('out_h', 'out_w'))
                continue
            if section == 'bench' and f.name == 'classes':
                continue
            table['{}.{}'.format(section, f.name)] = (section, (f.name,))
    return table


KEYS = _key_table()


def _coerce(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        # YAML 1.1 reads 1e-3 (no dot) as a string
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigValueError("{} must be a {}, got {!r}".format(
            key, type(default).__name__, value))
    return value


@dataclass
class ExperimentConfig:
    """Every tunable of one experiment, grouped by component"""
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rsn: RsnConfig = field(default_factory=RsnConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.head.num_classes != self.bench.num_classes:
            raise ConfigValueError(
                "head.num_classes = {} but the benchmark has {} classes plus "
                "background".format(self.head.num_classes,
                                    self.bench.num_classes - 1))
        try:
            self.pool.windows(*self.head.density)
        except ValueError as err:
            raise ConfigValueError(str(err))

    def as_dict(self):
        """Dotted key -> value for every recognised key"""
        values = OrderedDict()
        for key, (section, names) in KEYS.items():
            part = getattr(self, section)
            items = tuple(getattr(part, n) for n in names)
            values[key] = items if len(names) > 1 else items[0]
        return values

    @classmethod
    def from_dict(cls, values):
        """Build a config from dotted keys; missing keys keep defaults"""
        defaults = cls().as_dict()
        kwargs = {section: {} for section in _SECTIONS}
        for key, value in values.items():
            if key not in KEYS:
                raise ConfigKeyError(key)
            section, names = KEYS[key]
            if len(names) > 1:
                kwargs[section].update(zip(names, value))
            elif key in _PARSERS:
                kwargs[section][names[0]] = value
            else:
                kwargs[section][names[0]] = _coerce(key, value,
                                                    defaults[key])
        parts = {}
        for section, cls_ in _SECTIONS.items():
            try:
                parts[section] = cls_(**kwargs[section])
            except ValueError as err:
                raise ConfigValueError("[{}] {}".format(section, err))
        return cls(**parts)

    def with_overrides(self, overrides):
        """Copy with some dotted keys replaced"""
        values = self.as_dict()
        for key in overrides:
            if key not in KEYS:
                raise ConfigKeyError(key)
        values.update(overrides)
        return type(self).from_dict(values)

    @classmethod
    def from_text(cls, text):
        values = OrderedDict()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigValueError("line {}: expected 'key = value', got "
                                       "{!r}".format(lineno, line))
            key, raw = (part.strip() for part in line.split('=', 1))
            if key not in KEYS:
                raise ConfigKeyError(key)
            parse = _PARSERS.get(key, (_parse_scalar, None))[0]
            values[key] = parse(raw)
        return cls.from_dict(values)

    @classmethod
    def load(cls, path):
        logger.debug("Reading experiment config %s", path)
        with open(path) as f:
            return cls.from_text(f.read())

    def to_text(self):
        lines = []
        for key, value in self.as_dict().items():
            fmt = _PARSERS.get(key, (None, _format_scalar))[1]
            lines.append('{} = {}'.format(key, fmt(value)))
        return '\n'.join(lines) + '\n'

    def save(self, path):
        with open(path, 'w') as f:
            f.write(self.to_text())


def ablation_variants(cfg):
    """The four compared variants, identical apart from the named keys"""
    return OrderedDict([
        ('global', cfg.with_overrides({'rsn.mode': 'global',
                                       'rsn.num_regions': 1})),
        ('offset-only', cfg.with_overrides({'rsn.mode': 'offset-only'})),
        ('non-gating', cfg.with_overrides({'rsn.mode': 'full',
                                           'gate.enabled': False})),
        ('full', cfg.with_overrides({'rsn.mode': 'full',
                                     'gate.enabled': True})),
    ])


__all__ = ['ConfigKeyError', 'ConfigValueError', 'ExperimentConfig',
           'TrainConfig', 'ablation_variants', 'load_configuration',
           'runtime_config']
