from pathlib import Path

from core.decorators import exit_codes
from core.management.base import PipelineCommand
from core.pipeline import decode, noisy_inputs, read_manifest, read_targets
from poses.keypoints import write_results as write_keypoints
from segmentation.instances import write_results as write_segments


class Command(PipelineCommand):
    help = 'Decode encoded tensors, optionally perturbed, into keypoint and mask results.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--targets', required=True, help='Directory written by encode')

    @exit_codes
    def handle(self, *args, **options):
        root = Path(options['targets'])
        manifest = read_manifest(root)
        # the tensors fix R; mode and sigma follow the encoder unless given
        options = dict(options, radius=manifest['radius'])
        for key in ('mode', 'sigma_instance'):
            if options.get(key) is None:
                options[key] = manifest[key]
        config = self.run_config(options)
        out = self.out_dir(options)

        keypoints, segments, images = {}, {}, []
        for image_id in manifest['image_ids']:
            heatmaps, keycentroid, offsets, _ = read_targets(root, image_id)
            inputs = noisy_inputs(heatmaps, keycentroid, offsets, config, image_id)
            poses, refined, instances = decode(*inputs, config)
            keypoints[image_id] = poses
            segments[image_id] = instances
            images.append({
                'image_id': image_id,
                'height': heatmaps.height,
                'width': heatmaps.width,
                'poses': len(poses),
                'keypoints': len(refined),
                'instances': sum(1 for instance in instances if instance.mask is not None),
            })

        write_keypoints(keypoints, out / 'keypoints.json')
        write_segments(segments, out / 'segm.json')
        self.write_json({'config': self.config_dict(config), 'images': images}, out / 'decode.json')

        self.stdout.write(self.style.SUCCESS(f'Decoded {len(images)} images into {out}'))
