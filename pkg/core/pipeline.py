"""
Stage wiring shared by the management commands.

Scenes come from the generator, targets from the encoders and results from
the two decoders. Encoded targets live on disk as one directory per image
next to an ``encode.json`` manifest.
"""
import json
import logging
from pathlib import Path

from encoding.encoders import encode_scene
from encoding.targets import CentroidMode, MaskCentroidSet, OffsetField
from fields import kdcf
from poses.decoder import decode_poses, perturb
from scenes.generator import generate_dataset, occlude_scene
from segmentation.decoder import decode_instances

logger = logging.getLogger(__name__)

MANIFEST = 'encode.json'
OCCLUDED_PAIR = (1, 2)
OCCLUSION_JITTER = 0.05


def make_scenes(config):
    """
    ``config.count`` scenes. With ``config.occlude`` every scene holds at
    least two congruent figures and person 2 is pushed behind person 1.
    """
    persons = config.person_range
    options = {}
    if config.occlude > 0:
        if isinstance(persons, tuple):
            persons = (max(persons[0], 2), max(persons[1], 2))
        else:
            persons = max(persons, 2)
        options.update(shared_pose=True, pose_jitter=OCCLUSION_JITTER)
    scenes = generate_dataset(config.count, persons, (config.canvas, config.canvas), config.seed, **options)
    if config.occlude > 0:
        scenes = [
            occlude_scene(scene, OCCLUDED_PAIR, config.occlude, rng_seed=config.seed + scene.image_id)
            for scene in scenes
        ]
    logger.info('generated %d scenes (occlusion %.2f)', len(scenes), config.occlude)
    return scenes


def encode(scene, config, radius=None, mode=None):
    return encode_scene(
        scene,
        config.radius if radius is None else radius,
        CentroidMode(mode or config.mode),
        config.sigma_instance,
        workers=config.workers,
    )


def noisy_inputs(heatmaps, keycentroid, offsets, config, image_id):
    """
    Decoder inputs with seeded Gaussian noise: ``config.noise`` on the
    heatmaps (clipped to [0, 1]) and ``config.offset_noise`` on the
    KeyCentroid displacements and the instance offsets.
    """
    heatmaps = perturb(heatmaps, config.noise, rng_seed=[config.seed, image_id, 0], clip=(0.0, 1.0))
    keycentroid = perturb(keycentroid, config.offset_noise, rng_seed=[config.seed, image_id, 1])
    field = perturb(offsets.field, config.offset_noise, rng_seed=[config.seed, image_id, 2])
    return heatmaps, keycentroid, OffsetField(field, offsets.foreground)


def decode(heatmaps, keycentroid, offsets, config, pose_overrides=None, seg_overrides=None):
    """(poses, refined keypoints, instances) of one image."""
    poses, refined = decode_poses(heatmaps, keycentroid, config=config.pose_config(**(pose_overrides or {})))
    instances = decode_instances(offsets, poses, config=config.seg_config(**(seg_overrides or {})))
    return poses, refined, instances


def image_dir(root, image_id):
    return Path(root) / 'images' / f'{image_id:06d}'


def write_targets(root, scene, targets):
    folder = image_dir(root, scene.image_id)
    folder.mkdir(parents=True, exist_ok=True)
    kdcf.save(targets.heatmaps, folder / 'heatmaps.kdcf')
    kdcf.save(targets.keycentroid.base, folder / 'keycentroid.kdcf')
    kdcf.save(targets.keycentroid.response, folder / 'response.kdcf')
    kdcf.save(targets.offsets.to_field(), folder / 'offsets.kdcf')
    kdcf.save(targets.exclusion, folder / 'exclusion.kdcf')
    targets.centroids.save(folder / 'centroids.json')


def write_manifest(root, config, image_ids):
    manifest = {
        'radius': config.radius,
        'mode': config.mode,
        'sigma_instance': config.sigma_instance,
        'image_ids': list(image_ids),
    }
    Path(root, MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return manifest


def read_manifest(root):
    path = Path(root, MANIFEST)
    if not path.is_file():
        raise FileNotFoundError(2, 'no encode manifest', str(path))
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f'{path} is not valid JSON: {exc}') from exc


def read_targets(root, image_id):
    """(heatmaps, keycentroid base, offsets, centroids) of one encoded image."""
    folder = image_dir(root, image_id)
    heatmaps = kdcf.load(folder / 'heatmaps.kdcf')
    keycentroid = kdcf.load(folder / 'keycentroid.kdcf')
    offsets = OffsetField.from_field(kdcf.load(folder / 'offsets.kdcf'))
    if keycentroid.channels != 2 * heatmaps.channels or heatmaps.shape[1:] != offsets.shape[1:]:
        raise ValueError(f'encoded tensors of image {image_id} disagree in shape')
    centroids = MaskCentroidSet.load(folder / 'centroids.json')
    return heatmaps, keycentroid, offsets, centroids
