from core.decorators import exit_codes
from core.management.base import PipelineCommand
from core.pipeline import make_scenes
from core.rendering import label_image, save_image
from scenes.coco import write_dataset


class Command(PipelineCommand):
    help = 'Generate seeded synthetic scenes as a COCO keypoint dataset, with preview images.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--no-preview', action='store_true', help='Skip the preview PNGs')

    @exit_codes
    def handle(self, *args, **options):
        config = self.run_config(options)
        out = self.out_dir(options)
        scenes = make_scenes(config)
        write_dataset(scenes, out / 'scenes.json')

        images = []
        for scene in scenes:
            images.append({
                'image_id': scene.image_id,
                'persons': len(scene.persons),
                'achieved_overlap': scene.achieved_overlap,
                'occlusion': [person.occlusion for person in scene.persons],
            })
            if not options['no_preview']:
                preview = label_image([p.mask for p in scene.persons], (scene.height, scene.width))
                save_image(preview, out / f'preview_{scene.image_id:06d}.png')
        self.write_json({'config': self.config_dict(config), 'images': images}, out / 'gen.json')

        self.stdout.write(self.style.SUCCESS(f'Generated {len(scenes)} scenes in {out}'))
