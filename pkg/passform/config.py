# -*- coding: utf-8 -*-
"""
passform.config
~~~~~~~~~~~~~~~

Reading run configuration files and recording what a run was configured with.
"""
import datetime
import hashlib
import json
import os
import subprocess

from . import __version__


def canonical_json(data):
    """Serializes `data` with sorted keys and no insignificant whitespace."""

    return json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)


def config_hash(data):
    """Short sha256 digest of the canonical JSON form of `data`."""

    return hashlib.sha256(canonical_json(data).encode('utf-8')).hexdigest()[:16]


def describe_version():
    """`git describe` of the working tree, or the package version outside a checkout."""

    try:
        out = subprocess.run(['git', 'describe', '--always', '--dirty', '--tags'],
                             cwd=os.path.dirname(os.path.abspath(__file__)),
                             stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                             timeout=5, check=True)
        described = out.stdout.decode().strip()
    except (OSError, subprocess.SubprocessError):
        described = ''
    if not described:
        return __version__
    return '{}+{}'.format(__version__, described)


class RunConfig:
    """Class for reading a JSON configuration file for the command line.

    The file holds an optional ``"global"`` object (seed, out_dir,
    resolution) and one object per subcommand, keyed by the subcommand name
    with underscores (``"train_fnm"``) or dashes (``"train-fnm"``).

    Attributes:
        source (str): Path the configuration was read from.
        sections (dict): Parsed file contents.

    """

    def __init__(self):
        """The RunConfig class is initialized empty."""

        self.reset()

    def __str__(self):
        return json.dumps(self.__dict__, indent=2, separators=(',', ': '))

    def reset(self):
        """Forgets any loaded file."""

        self.source = None
        self.sections = {}

    def load_json(self, infile):
        """Reads a configuration file.

        Args:
            infile (str): Name of the .json file to parse.

        """

        self.reset()
        with open(infile) as json_config:
            self.sections = json.load(json_config)
        self.source = os.path.abspath(infile)

    def defaults_for(self, command):
        """Flattened option defaults for one subcommand.

        Global values come first and are overridden by the subcommand section.
        Keys are converted to click parameter names (dashes to underscores).
        """

        merged = {}
        for key in ('global', command, command.replace('-', '_')):
            for name, value in self.sections.get(key, {}).items():
                merged[name.replace('-', '_')] = value
        return merged


def write_run_record(out_dir, command, params, seed):
    """Writes ``run.json`` into an artifact directory and returns its hash.

    Args:
        out_dir (str): Artifact directory, created if missing.
        command (str): Subcommand that produced the artifacts.
        params (dict): Full resolved parameter set.
        seed (int): Seed all randomness was derived from.

    """

    os.makedirs(out_dir, exist_ok=True)
    body = {'command': command, 'params': params, 'seed': seed}
    digest = config_hash(body)
    record = dict(body, config_hash=digest, version=describe_version(),
                  created=datetime.datetime.now(datetime.timezone.utc).isoformat())
    tmp = os.path.join(out_dir, 'run.json.tmp')
    with open(tmp, 'w') as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
    os.replace(tmp, os.path.join(out_dir, 'run.json'))
    return digest
