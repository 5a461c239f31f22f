import numpy as np

from regionlets.bench import DetectionInstance
from regionlets.gradcheck import tiny_config
from regionlets.selection import RegionOfInterest


def small_experiment(directory, **overrides):
    "A tiny detector on a handful of 32x32 images."
    values = {'bench.image_size': 32, 'bench.num_train': 4,
              'bench.num_val': 2, 'train.epochs': 1, 'train.batch_size': 2,
              'train.map_subset': 2, 'train.output_dir': str(directory)}
    values.update(overrides)
    return tiny_config().with_overrides(values)


def toy_instance(rng, size=16):
    "One random image with a single object and three proposals."
    image = rng.uniform(0, 1, (3, size, size))
    gt_boxes = np.array([[2.0, 3.0, 11.0, 10.0]])
    gt_labels = np.array([1])
    proposals = [RegionOfInterest(2.5, 2.5, 8.0, 7.5),
                 RegionOfInterest(1.0, 4.0, 10.0, 7.0),
                 RegionOfInterest(8.0, 9.0, 6.0, 5.0)]
    return DetectionInstance(image, gt_boxes, gt_labels, proposals)


def read_csv_lines(path):
    with open(path) as f:
        return f.read().splitlines()
