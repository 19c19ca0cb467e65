from pathlib import Path

from core.decorators import exit_codes
from core.management.base import PipelineCommand
from evaluation.metrics import EvalConfig, average_precision, write_metrics
from poses.keypoints import read_results as read_keypoints
from scenes.coco import read_dataset
from segmentation.instances import read_results as read_segments

RESULT_FILES = (
    ('keypoints', 'keypoints.json', read_keypoints),
    ('segm', 'segm.json', read_segments),
)


class Command(PipelineCommand):
    help = 'Score keypoint and mask results against ground truth (COCO-style AP).'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--gt', required=True, help='COCO dataset written by gen')
        parser.add_argument('--results', required=True, help='Directory written by decode')

    @exit_codes
    def handle(self, *args, **options):
        config = self.run_config(options)
        scenes = read_dataset(options['gt'])
        results_dir = Path(options['results'])
        eval_config = EvalConfig(workers=config.workers)

        metrics = {}
        for iou_type, name, reader in RESULT_FILES:
            path = results_dir / name
            if path.is_file():
                metrics[iou_type] = average_precision(reader(path), scenes, iou_type, eval_config)
        if not metrics:
            raise FileNotFoundError(2, 'no keypoints.json or segm.json', str(results_dir))

        out = self.out_dir(options)
        write_metrics(metrics, out / 'metrics.json')
        for iou_type, summary in metrics.items():
            self.stdout.write(f'{iou_type}: AP {summary["AP"]:.4f}  AP50 {summary["AP50"]:.4f}  AP75 {summary["AP75"]:.4f}')
        self.stdout.write(self.style.SUCCESS(f'Wrote {out / "metrics.json"}'))
