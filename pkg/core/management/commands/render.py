import json
from pathlib import Path

from core.decorators import exit_codes
from core.management.base import PipelineCommand
from core.rendering import field_image, label_image, pose_image, save_image
from fields import kdcf
from poses.keypoints import result_pose
from scenes.coco import coco_to_scenes, decode_rle


class Command(PipelineCommand):
    help = 'Render a KDCF field (PGM) or a results / scenes JSON file (paletted PNG).'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('input', help='.kdcf tensor or .json results')
        parser.add_argument('--image', required=True, help='Output image path')
        parser.add_argument('--channel', type=int, help='Field channel; default is the channel maximum')
        parser.add_argument('--image-id', type=int, help='Image to draw from a JSON file; default is the first')

    @exit_codes
    def handle(self, *args, **options):
        source = Path(options['input'])
        if source.suffix == '.kdcf':
            image = field_image(kdcf.load(source), options['channel'])
        elif source.suffix == '.json':
            image = self.render_json(source, options)
        else:
            raise ValueError(f'cannot render {source.name}: expected a .kdcf or .json file')
        target = Path(options['image'])
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(image, target)
        self.stdout.write(self.style.SUCCESS(f'Rendered {source} to {target}'))

    def render_json(self, source, options):
        try:
            payload = json.loads(source.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f'{source} is not valid JSON: {exc}') from exc

        if isinstance(payload, dict) and 'images' in payload:
            scenes = coco_to_scenes(payload)
            if not scenes:
                raise ValueError(f'{source} holds no images')
            scene = self.pick(scenes, options['image_id'], lambda s: s.image_id)
            return label_image([p.mask for p in scene.persons], (scene.height, scene.width))

        if not isinstance(payload, list) or not payload:
            raise ValueError(f'{source} holds no results to render')
        image_id = options['image_id'] if options['image_id'] is not None else payload[0].get('image_id')
        items = [item for item in payload if item.get('image_id') == image_id]
        if not items:
            raise ValueError(f'{source} has no results for image {image_id}')
        if all('segmentation' in item for item in items):
            masks = [decode_rle(item['segmentation']) for item in items]
            return label_image(masks, masks[0].shape)
        if all('keypoints' in item for item in items):
            return pose_image([result_pose(item) for item in items], self.image_shape(source, image_id, options))
        raise ValueError(f'{source} is neither keypoint nor segmentation results')

    def image_shape(self, source, image_id, options):
        """(H, W) of ``image_id`` as recorded by decode next to the results; the config canvas otherwise."""
        report = source.parent / 'decode.json'
        if report.exists():
            for entry in json.loads(report.read_text()).get('images', []):
                if entry.get('image_id') == image_id and 'height' in entry:
                    return entry['height'], entry['width']
        config = self.run_config(options)
        return config.canvas, config.canvas

    def pick(self, entries, image_id, key):
        if image_id is None:
            return entries[0]
        for entry in entries:
            if key(entry) == image_id:
                return entry
        raise ValueError(f'no image {image_id}')
