import logging
import time

import numpy as np
from django.core.management.base import CommandError

from core.decorators import exit_codes
from core.management.base import PipelineCommand
from core.pipeline import decode, encode, noisy_inputs
from losses.objectives import heatmap_bce, keycentroid_l1, offset_l1
from poses.decoder import perturb, pgo_smooth
from scenes.generator import generate_scene

logger = logging.getLogger(__name__)

BENCH_PERSONS = 3
LOSS_NOISE = 0.05
BUDGET_EXCEEDED = 1


def percentiles(samples_ms):
    samples = np.asarray(samples_ms, dtype=np.float64)
    return {
        'p50': float(np.percentile(samples, 50)),
        'p90': float(np.percentile(samples, 90)),
        'min': float(samples.min()),
        'max': float(samples.max()),
    }


def time_calls(func, warmup, iterations):
    for _ in range(warmup):
        func()
    samples = []
    for _ in range(iterations):
        start = time.perf_counter()
        func()
        samples.append((time.perf_counter() - start) * 1000.0)
    return percentiles(samples)


class Command(PipelineCommand):
    help = 'Time full decoding of a synthetic scene and report training-loss values.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--iterations', type=int, default=20)
        parser.add_argument('--warmup', type=int, default=2)
        parser.add_argument('--budget-ms', type=float, help='Fail when single-threaded decode P50 exceeds this')

    @exit_codes
    def handle(self, *args, **options):
        if options['persons'] is None:
            options['persons'] = BENCH_PERSONS
        config = self.run_config(options)
        if options['warmup'] < 1 or options['iterations'] < 1:
            raise ValueError('warmup and iterations must both be at least 1')

        scene = generate_scene(config.persons, (config.canvas, config.canvas), config.seed)
        targets = encode(scene, config)
        heatmaps, keycentroid, offsets = noisy_inputs(
            targets.heatmaps, targets.keycentroid.base, targets.offsets, config, scene.image_id,
        )
        poses, refined, instances = decode(heatmaps, keycentroid, offsets, config)

        single = config.replace(workers=1)
        warmup, iterations = options['warmup'], options['iterations']
        timings = {
            'decode_single': time_calls(lambda: decode(heatmaps, keycentroid, offsets, single), warmup, iterations),
            'decode_parallel': time_calls(lambda: decode(heatmaps, keycentroid, offsets, config), warmup, iterations),
            'pgo_single': time_calls(lambda: pgo_smooth(heatmaps, workers=1), warmup, iterations),
            'pgo_parallel': time_calls(lambda: pgo_smooth(heatmaps, workers=config.workers), warmup, iterations),
        }
        timings['pgo_speedup'] = timings['pgo_single']['p50'] / max(timings['pgo_parallel']['p50'], 1e-9)

        report = {
            'config': self.config_dict(config),
            'work': {
                'height': scene.height,
                'width': scene.width,
                'joints': heatmaps.channels,
                'persons': len(scene.persons),
                'poses': len(poses),
                'keypoints': len(refined),
                'instances': len(instances),
                'iterations': iterations,
                'warmup': warmup,
            },
            'losses': self.loss_values(targets, config),
            'timings_ms': timings,
        }
        out = self.out_dir(options)
        self.write_json(report, out / 'bench.json')
        self.stdout.write(
            f'decode P50 {timings["decode_single"]["p50"]:.1f} ms single-threaded, '
            f'{timings["decode_parallel"]["p50"]:.1f} ms with {config.workers} workers'
        )

        budget = options['budget_ms']
        if budget is not None and timings['decode_single']['p50'] > budget:
            raise CommandError(
                f'decode P50 {timings["decode_single"]["p50"]:.1f} ms exceeds the {budget:g} ms budget',
                returncode=BUDGET_EXCEEDED,
            )
        self.stdout.write(self.style.SUCCESS(f'Wrote {out / "bench.json"}'))

    def loss_values(self, targets, config):
        """Losses of lightly perturbed targets against the clean ones."""
        exclude = targets.exclusion
        heatmaps = perturb(targets.heatmaps, LOSS_NOISE, rng_seed=[config.seed, 0], clip=(0.0, 1.0))
        keycentroid = perturb(targets.keycentroid.base, LOSS_NOISE, rng_seed=[config.seed, 1])
        offsets = perturb(targets.offsets.field, LOSS_NOISE, rng_seed=[config.seed, 2])
        values = {
            'heatmap_bce': heatmap_bce(heatmaps, targets.heatmaps, exclude).value,
            'keycentroid_l1': keycentroid_l1(keycentroid, targets.keycentroid, exclude).value,
            'offset_l1': offset_l1(offsets, targets.offsets, exclude).value,
        }
        logger.debug('bench losses %s', values)
        return values
