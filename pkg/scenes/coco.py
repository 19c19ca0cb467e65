"""
COCO-style JSON for synthetic scenes.

Masks use the uncompressed RLE of the COCO API: pixels are read in
column-major order and ``counts`` alternates run lengths starting with a
run of zeros (possibly empty).
"""
import json
import logging
from pathlib import Path

import numpy as np

from .scene import PersonGT, Scene
from .skeleton import JOINT_NAMES, NUM_JOINTS, TREE_EDGES

logger = logging.getLogger(__name__)

CATEGORY_ID = 1
VISIBLE = 2
OCCLUDED = 1


def encode_rle(mask):
    mask = np.asarray(mask, dtype=bool)
    flat = mask.ravel(order='F').astype(np.int8)
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts.insert(0, 0)
    return {'size': [int(mask.shape[0]), int(mask.shape[1])], 'counts': [int(c) for c in counts]}


def decode_rle(rle):
    height, width = rle['size']
    counts = np.asarray(rle['counts'], dtype=np.int64)
    if counts.sum() != height * width:
        raise ValueError(f'RLE counts sum to {counts.sum()}, expected {height * width}')
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order='F')


def categories():
    return [{
        'id': CATEGORY_ID,
        'name': 'person',
        'keypoints': list(JOINT_NAMES),
        'skeleton': [[a + 1, b + 1] for a, b in TREE_EDGES],
    }]


def _keypoint_triplets(person):
    triplets = []
    for (x, y), visible in zip(person.keypoints, person.visible):
        triplets += [float(x), float(y), VISIBLE if visible else OCCLUDED]
    return triplets


def person_annotation(person, image_id, annotation_id):
    return {
        'id': annotation_id,
        'image_id': image_id,
        'category_id': CATEGORY_ID,
        'instance_id': person.instance_id,
        'keypoints': _keypoint_triplets(person),
        'num_keypoints': person.num_visible,
        'segmentation': encode_rle(person.mask),
        'area': person.area,
        'bbox': list(person.bbox()),
        'iscrowd': 0,
        'ignore': int(person.is_small),
        'occlusion': float(person.occlusion),
    }


def scenes_to_coco(scenes):
    """A COCO dataset dict holding every scene as one image."""
    images, annotations = [], []
    annotation_id = 1
    for scene in scenes:
        image = {'id': scene.image_id, 'height': scene.height, 'width': scene.width}
        if scene.achieved_overlap is not None:
            image['achieved_overlap'] = scene.achieved_overlap
        images.append(image)
        for person in scene.persons:
            annotations.append(person_annotation(person, scene.image_id, annotation_id))
            annotation_id += 1
    return {'images': images, 'annotations': annotations, 'categories': categories()}


def coco_to_scenes(dataset):
    by_image = {}
    for annotation in dataset.get('annotations', []):
        by_image.setdefault(annotation['image_id'], []).append(annotation)

    scenes = []
    for image in dataset['images']:
        persons = []
        for annotation in by_image.get(image['id'], []):
            triplets = np.asarray(annotation['keypoints'], dtype=np.float64).reshape(NUM_JOINTS, 3)
            persons.append(PersonGT(
                instance_id=annotation.get('instance_id', annotation['id']),
                keypoints=triplets[:, :2],
                visible=triplets[:, 2] == VISIBLE,
                mask=decode_rle(annotation['segmentation']),
                is_small=bool(annotation.get('ignore', 0)),
                occlusion=float(annotation.get('occlusion', 0.0)),
            ))
        scenes.append(Scene(
            height=image['height'],
            width=image['width'],
            persons=persons,
            image_id=image['id'],
            achieved_overlap=image.get('achieved_overlap'),
        ))
    return scenes


def write_dataset(scenes, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scenes_to_coco(scenes), sort_keys=True))
    logger.info('wrote %d scenes to %s', len(scenes), path)


def read_dataset(path):
    try:
        dataset = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f'{path} is not valid JSON: {exc}') from exc
    if 'images' not in dataset:
        raise ValueError(f'{path} has no images section')
    return coco_to_scenes(dataset)
