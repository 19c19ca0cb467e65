import json
import math
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from PIL import Image

from fields.core import DenseField, SubPixel
from poses.keypoints import PersonPose, RefinedKeypoint, read_results
from scenes.coco import read_dataset, write_dataset
from scenes.scene import Scene

from .ablation import igo_study, mode_study, radius_study, run_study
from .forms import RunConfig
from .rendering import field_image, label_image, pose_image


def run(name, *args, **options):
    call_command(name, *args, stdout=StringIO(), **options)


def exit_code(name, *args, **options):
    try:
        run(name, *args, **options)
    except CommandError as exc:
        return exc.returncode
    return 0


def pipeline(root, **gen_options):
    """gen, encode, decode and eval under ``root``; returns the metrics."""
    root = Path(root)
    run('gen', out=str(root / 'gen'), no_preview=True, **gen_options)
    run('encode', scenes=str(root / 'gen' / 'scenes.json'), out=str(root / 'enc'))
    run('decode', targets=str(root / 'enc'), out=str(root / 'dec'))
    run('eval', gt=str(root / 'gen' / 'scenes.json'), results=str(root / 'dec'), out=str(root / 'eval'))
    return json.loads((root / 'eval' / 'metrics.json').read_text())


class RunConfigTests(SimpleTestCase):

    def test_defaults_from_settings(self):
        config = RunConfig.resolve()
        self.assertEqual(config.radius, 32.0)
        self.assertEqual(config.mode, 'dynamic')
        self.assertEqual(config.igo_sigma, 0.1)
        self.assertIsNone(config.max_persons)

    def test_round_trip(self):
        config = RunConfig.resolve({'radius': 16.0, 'max_persons': 3, 'mode': 'static', 'tol': 1e-4})
        self.assertEqual(RunConfig.parse(config.serialize()), config)

    def test_flag_beats_file_beats_settings(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.json'
            path.write_text(json.dumps({'radius': 8.0, 'seed': 5}))
            config = RunConfig.resolve({'seed': 7, 'noise': None}, path)
        self.assertEqual(config.radius, 8.0)
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.noise, 0.0)

    def test_saved_file_loads(self):
        config = RunConfig.resolve({'canvas': 201})
        with tempfile.TemporaryDirectory() as tmp:
            config.save(Path(tmp) / 'config.json')
            self.assertEqual(RunConfig.load(Path(tmp) / 'config.json'), config)

    def test_out_of_range_values(self):
        bad = [
            {'persons': 0}, {'radius': 0.0}, {'sigma_hvk': 0.5}, {'sigma_hvk': 0.05},
            {'sigma_lvk': 1.0}, {'igo_sigma': 1.5}, {'threshold': 1.0}, {'mode': 'hybrid'},
            {'canvas': 32}, {'occlude': 1.2}, {'workers': 0}, {'tol': 0.0}, {'noise': -1.0},
            {'persons': 3, 'max_persons': 2},
        ]
        for options in bad:
            with self.subTest(options=options):
                with self.assertRaises(ValidationError):
                    RunConfig.resolve(options)

    def test_unknown_keys(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.json'
            path.write_text(json.dumps({'bogus': 1}))
            with self.assertRaises(ValidationError):
                RunConfig.resolve(path=path)

    def test_decoder_configs(self):
        config = RunConfig.resolve({'sigma_instance': 4.0, 'workers': 2})
        self.assertEqual(config.pose_config(radius=8.0).radius, 8.0)
        self.assertEqual(config.pose_config().workers, 2)
        seg = config.seg_config(igo_sigma=0.5)
        self.assertEqual((seg.mode, seg.sigma_j, seg.igo_sigma), ('dynamic', 4.0, 0.5))

    def test_person_range(self):
        self.assertEqual(RunConfig.resolve({'persons': 2}).person_range, 2)
        self.assertEqual(RunConfig.resolve({'persons': 1, 'max_persons': 4}).person_range, (1, 4))


class RenderingTests(SimpleTestCase):

    def test_zero_field_is_black(self):
        pixels = np.asarray(field_image(DenseField.zeros(2, 12, 16)))
        self.assertEqual(pixels.shape, (12, 16))
        self.assertEqual(pixels.max(), 0)

    def test_peak_lands_on_argmax(self):
        plane = np.zeros((20, 30), dtype=np.float32)
        plane[7, 21] = 0.9
        plane[3, 4] = 0.4
        pixels = np.asarray(field_image(DenseField(plane), channel=0))
        self.assertEqual(np.unravel_index(pixels.argmax(), pixels.shape), (7, 21))
        self.assertEqual(pixels[7, 21], 255)

    def test_bad_channel(self):
        with self.assertRaises(ValueError):
            field_image(DenseField.zeros(2, 4, 4), channel=2)

    def test_two_instances_two_indices(self):
        first = np.zeros((10, 10), dtype=bool)
        first[:5] = True
        second = np.zeros((10, 10), dtype=bool)
        second[6:] = True
        image = label_image([first, second], (10, 10))
        self.assertEqual(image.mode, 'P')
        self.assertEqual(set(np.unique(np.asarray(image)).tolist()), {0, 1, 2})

    def test_pose_drawing(self):
        joints = [RefinedKeypoint(j, SubPixel(10.0 + 2 * j, 20.0), 0.9, 1) for j in range(17)]
        pixels = np.asarray(pose_image([PersonPose(joints, 0.9)], (64, 64)))
        self.assertEqual(set(np.unique(pixels).tolist()), {0, 1})
        self.assertEqual(pixels[20, 10], 1)


class GenCommandTests(SimpleTestCase):

    def test_same_seed_same_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            first, second = Path(tmp) / 'a', Path(tmp) / 'b'
            for out in (first, second):
                run('gen', persons=3, seed=1, out=str(out))
            for name in ('scenes.json', 'gen.json', 'preview_000001.png'):
                self.assertEqual((first / name).read_bytes(), (second / name).read_bytes())

    def test_invalid_persons(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(exit_code('gen', persons=0, out=tmp), 2)

    def test_occlusion_sidecar(self):
        with tempfile.TemporaryDirectory() as tmp:
            run('gen', occlude=0.7, no_preview=True, out=tmp)
            sidecar = json.loads((Path(tmp) / 'gen.json').read_text())
            self.assertFalse(list(Path(tmp).glob('preview_*.png')))
        image = sidecar['images'][0]
        self.assertEqual(image['persons'], 2)
        self.assertGreaterEqual(image['achieved_overlap'], 0.7)
        self.assertGreater(max(image['occlusion']), 0.5)


class PipelineCommandTests(SimpleTestCase):

    def test_noiseless_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            metrics = pipeline(tmp, count=3, persons=1, max_persons=3, seed=2)
        self.assertEqual(metrics['keypoints']['AP'], 1.0)
        self.assertEqual(metrics['segm']['AP'], 1.0)

    def test_occluded_round_trip_segments_hidden_figure(self):
        with tempfile.TemporaryDirectory() as tmp:
            metrics = pipeline(tmp, count=2, occlude=0.7, seed=0)
        self.assertEqual(metrics['segm']['AP'], 1.0)

    def test_decode_is_deterministic(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            run('gen', out=str(root / 'gen'), persons=2, seed=3, no_preview=True)
            run('encode', scenes=str(root / 'gen' / 'scenes.json'), out=str(root / 'enc'))
            for name in ('a', 'b'):
                run('decode', targets=str(root / 'enc'), out=str(root / name), noise=0.1, offset_noise=1.0)
            for name in ('keypoints.json', 'segm.json', 'decode.json'):
                self.assertEqual((root / 'a' / name).read_bytes(), (root / 'b' / name).read_bytes())

    def test_encode_writes_tensors(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            run('gen', out=str(root / 'gen'), no_preview=True)
            run('encode', scenes=str(root / 'gen' / 'scenes.json'), out=str(root / 'enc'), radius=16.0, mode='static')
            manifest = json.loads((root / 'enc' / 'encode.json').read_text())
            folder = root / 'enc' / 'images' / '000001'
            names = sorted(p.name for p in folder.iterdir())
            self.assertEqual(RunConfig.load(root / 'enc' / 'config.json').radius, 16.0)
        self.assertEqual((manifest['radius'], manifest['mode'], manifest['image_ids']), (16.0, 'static', [1]))
        self.assertEqual(names, ['centroids.json', 'exclusion.kdcf', 'heatmaps.kdcf', 'keycentroid.kdcf',
                                 'offsets.kdcf', 'response.kdcf'])

    def test_empty_results_score_zero(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            run('gen', out=str(root / 'gen'), no_preview=True)
            (root / 'dec').mkdir()
            (root / 'dec' / 'keypoints.json').write_text('[]')
            code = exit_code('eval', gt=str(root / 'gen' / 'scenes.json'), results=str(root / 'dec'), out=tmp)
            metrics = json.loads((root / 'metrics.json').read_text())
        self.assertEqual(code, 0)
        self.assertEqual(metrics['keypoints']['AP'], 0.0)
        self.assertNotIn('segm', metrics)

    def test_evaluation_failure_exits_three(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            write_dataset([Scene(64, 64, [], image_id=1)], root / 'scenes.json')
            (root / 'keypoints.json').write_text('[]')
            self.assertEqual(exit_code('eval', gt=str(root / 'scenes.json'), results=tmp, out=tmp), 3)

    def test_missing_and_corrupt_inputs_exit_two(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            self.assertEqual(exit_code('encode', scenes=str(root / 'nope.json'), out=tmp), 2)
            self.assertEqual(exit_code('decode', targets=str(root / 'nope'), out=tmp), 2)
            self.assertEqual(exit_code('eval', gt=str(root / 'nope.json'), results=tmp, out=tmp), 2)

            run('gen', out=str(root / 'gen'), no_preview=True)
            run('encode', scenes=str(root / 'gen' / 'scenes.json'), out=str(root / 'enc'))
            (root / 'enc' / 'images' / '000001' / 'heatmaps.kdcf').write_bytes(b'KDCF\x01')
            self.assertEqual(exit_code('decode', targets=str(root / 'enc'), out=tmp), 2)
            self.assertEqual(exit_code('decode', targets=str(root / 'enc'), out=tmp, mode='hybrid'), 2)


class AcceptanceTests(SimpleTestCase):

    def test_fifty_scene_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            metrics = pipeline(tmp, count=50, persons=1, max_persons=4, seed=11)
            scenes = read_dataset(Path(tmp) / 'gen' / 'scenes.json')
            results = read_results(Path(tmp) / 'dec' / 'keypoints.json')
        self.assertEqual(metrics['keypoints']['AP'], 1.0)
        self.assertEqual(metrics['segm']['AP'], 1.0)
        for scene in scenes:
            for person in scene.persons:
                for joint in np.flatnonzero(person.visible):
                    distances = [
                        math.dist(pose.joints[joint].position, person.keypoints[joint])
                        for pose in results.get(scene.image_id, [])
                        if pose.joints[joint] is not None
                    ]
                    self.assertLessEqual(min(distances, default=math.inf), 0.5)


class RenderCommandTests(SimpleTestCase):

    def test_heatmap_render(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            run('gen', out=str(root / 'gen'), no_preview=True)
            run('encode', scenes=str(root / 'gen' / 'scenes.json'), out=str(root / 'enc'))
            source = root / 'enc' / 'images' / '000001' / 'heatmaps.kdcf'
            for name in ('a.pgm', 'b.pgm'):
                run('render', str(source), image=str(root / name), channel=0)
            self.assertEqual((root / 'a.pgm').read_bytes(), (root / 'b.pgm').read_bytes())
            with Image.open(root / 'a.pgm') as image:
                self.assertEqual(image.mode, 'L')
                pixels = np.asarray(image)
        self.assertEqual(pixels.max(), 255)
        self.assertEqual(pixels.min(), 0)

    def test_segmentation_render(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            run('gen', out=str(root / 'gen'), persons=2, seed=4, no_preview=True)
            run('encode', scenes=str(root / 'gen' / 'scenes.json'), out=str(root / 'enc'))
            run('decode', targets=str(root / 'enc'), out=str(root / 'dec'))
            run('render', str(root / 'dec' / 'segm.json'), image=str(root / 'segm.png'))
            with Image.open(root / 'segm.png') as image:
                self.assertEqual(image.mode, 'P')
                labels = set(np.unique(np.asarray(image)).tolist())
        self.assertEqual(labels, {0, 1, 2})

    def test_keypoint_render_uses_image_size(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            run('gen', out=str(root / 'gen'), canvas=201, seed=3, no_preview=True)
            run('encode', scenes=str(root / 'gen' / 'scenes.json'), out=str(root / 'enc'))
            run('decode', targets=str(root / 'enc'), out=str(root / 'dec'))
            run('render', str(root / 'dec' / 'keypoints.json'), image=str(root / 'poses.png'))
            with Image.open(root / 'poses.png') as image:
                self.assertEqual(image.size, (201, 201))
                labels = set(np.unique(np.asarray(image)).tolist())
        self.assertEqual(labels, {0, 1})

    def test_unknown_input(self):
        with tempfile.TemporaryDirectory() as tmp:
            source = Path(tmp) / 'notes.txt'
            source.write_text('hello')
            self.assertEqual(exit_code('render', str(source), image=str(Path(tmp) / 'x.png')), 2)
            self.assertEqual(exit_code('render', str(Path(tmp) / 'gone.kdcf'), image=str(Path(tmp) / 'x.pgm')), 2)


class BenchCommandTests(SimpleTestCase):

    def test_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            run('bench', persons=1, iterations=2, warmup=1, workers=2, out=tmp)
            report = json.loads((Path(tmp) / 'bench.json').read_text())
        self.assertEqual(report['work']['joints'], 17)
        self.assertEqual(report['work']['poses'], 1)
        self.assertEqual(set(report['losses']), {'heatmap_bce', 'keycentroid_l1', 'offset_l1'})
        self.assertTrue(all(value > 0 for value in report['losses'].values()))
        for key in ('decode_single', 'decode_parallel', 'pgo_single', 'pgo_parallel'):
            self.assertLessEqual(report['timings_ms'][key]['min'], report['timings_ms'][key]['p50'])

    def test_budget_and_warmup(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(exit_code('bench', persons=1, iterations=1, warmup=1, budget_ms=1e-6, out=tmp), 1)
            self.assertEqual(exit_code('bench', persons=1, warmup=0, out=tmp), 2)


class AblationTests(SimpleTestCase):

    def config(self, **options):
        return RunConfig.resolve(dict(options, workers=1))

    def test_larger_radius_localizes_better(self):
        rows, summary = radius_study(self.config(noise=0.1, offset_noise=1.5), seeds=30, radii=(32.0, 8.0))
        self.assertEqual([row['radius'] for row in rows], [32.0, 8.0])
        self.assertLessEqual(rows[0]['error'], rows[1]['error'])
        self.assertLessEqual(rows[0]['missed'], rows[1]['missed'])
        self.assertEqual(summary['best_radius'], 32.0)

    def test_small_igo_sigma_keeps_boundaries(self):
        rows, _ = igo_study(self.config(), seeds=30, sigmas=(0.1, 0.5))
        self.assertGreaterEqual(rows[0]['boundary_iou'], rows[1]['boundary_iou'])

    def test_dynamic_centroids_match_static_under_occlusion(self):
        for overlap in (0.5, 0.7):
            rows, summary = mode_study(self.config(occlude=overlap, offset_noise=1.5), seeds=30)
            static, dynamic = rows
            with self.subTest(overlap=overlap):
                self.assertEqual((static['mode'], dynamic['mode']), ('static', 'dynamic'))
                self.assertEqual(dynamic['instances'], 60)
                self.assertGreaterEqual(dynamic['mask_iou'], static['mask_iou'])
                self.assertGreater(dynamic['mask_iou'], 0.9)
                self.assertAlmostEqual(summary['margin'], dynamic['mask_iou'] - static['mask_iou'])

    def test_unknown_study(self):
        with self.assertRaises(ValueError):
            run_study('depth', self.config())
        with self.assertRaises(ValueError):
            run_study('radius', self.config(), seeds=0)

    def test_command_tables_are_deterministic(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            for name in ('a', 'b'):
                run('ablate', study='mode', seeds=1, out=str(root / name))
            for name in ('ablation_mode.json', 'ablation_mode.csv'):
                self.assertEqual((root / 'a' / name).read_bytes(), (root / 'b' / name).read_bytes())
            payload = json.loads((root / 'a' / 'ablation_mode.json').read_text())
        self.assertEqual(payload['config']['offset_noise'], 1.5)
        self.assertEqual(len(payload['rows']), 2)
