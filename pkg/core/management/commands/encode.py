from core.decorators import exit_codes
from core.management.base import PipelineCommand
from core.pipeline import encode, write_manifest, write_targets
from scenes.coco import read_dataset


class Command(PipelineCommand):
    help = 'Encode a scene dataset into heatmap, KeyCentroid and offset tensors (KDCF).'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--scenes', required=True, help='COCO dataset written by gen')

    @exit_codes
    def handle(self, *args, **options):
        config = self.run_config(options)
        scenes = read_dataset(options['scenes'])
        out = self.out_dir(options)
        for scene in scenes:
            write_targets(out, scene, encode(scene, config))
        write_manifest(out, config, [scene.image_id for scene in scenes])
        config.save(out / 'config.json')

        self.stdout.write(self.style.SUCCESS(
            f'Encoded {len(scenes)} scenes (R={config.radius:g}, {config.mode}) in {out}'
        ))
