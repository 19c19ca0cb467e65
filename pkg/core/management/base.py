"""
Shared flags for the pipeline commands.
"""
import json
from dataclasses import asdict
from pathlib import Path

from django.core.management.base import BaseCommand

from core.forms import RunConfig


class PipelineCommand(BaseCommand):
    """
    Every command accepts the run parameters as flags and a ``--config``
    JSON file. A flag beats the file, the file beats the settings defaults.
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', help='RunConfig JSON file')
        parser.add_argument('--out', default='out', help='Output directory')
        parser.add_argument('--radius', type=float, help='Keypoint disk radius R')
        parser.add_argument('--sigma-hvk', type=float)
        parser.add_argument('--sigma-lvk', type=float)
        parser.add_argument('--sigma-instance', type=float)
        parser.add_argument('--igo-sigma', type=float)
        parser.add_argument('--threshold', type=float)
        parser.add_argument('--nms-radius', type=float)
        parser.add_argument('--mode', help='MaskCentroid mode: static or dynamic')
        parser.add_argument('--max-iters', type=int)
        parser.add_argument('--tol', type=float)
        parser.add_argument('--canvas', type=int)
        parser.add_argument('--persons', type=int)
        parser.add_argument('--max-persons', type=int)
        parser.add_argument('--count', type=int)
        parser.add_argument('--occlude', type=float)
        parser.add_argument('--seed', type=int)
        parser.add_argument('--noise', type=float)
        parser.add_argument('--offset-noise', type=float)
        parser.add_argument('--workers', type=int)

    def run_config(self, options):
        return RunConfig.resolve(options, options.get('config'))

    def out_dir(self, options):
        out = Path(options['out'])
        out.mkdir(parents=True, exist_ok=True)
        return out

    def write_json(self, payload, path):
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2))

    def config_dict(self, config):
        return asdict(config)
