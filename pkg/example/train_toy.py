import numpy as np

from regionlets.api import (ExperimentConfig, RegionletDetector,
                            generate_dataset)
from regionlets.commands import evaluate_model

# a small offset-only head that trains in about a minute
cfg = ExperimentConfig().with_overrides({
    'backbone.channels': (4, 8),
    'rsn.num_regions': 4,
    'rsn.mode': 'offset-only',
    'rsn.hidden': 32,
    'head.density': (2, 2),
    'head.fc_hidden': 32,
    'bench.image_size': 32,
    'bench.num_train': 40,
    'bench.num_val': 10,
})

train = generate_dataset(cfg.bench, seed=0)
val = generate_dataset(cfg.bench, seed=0, count=cfg.bench.num_val,
                       start=cfg.bench.num_train)

model = RegionletDetector(cfg, seed=0)
batch = cfg.train.batch_size
for epoch in range(5):
    losses = []
    for start in range(0, len(train), batch):
        lr = cfg.train.lr_at(model.iteration)
        losses.append(model.train_step(train[start:start + batch], lr)[0])
    print('epoch', epoch + 1, 'loss', np.mean(losses),
          'val mAP', evaluate_model(model, val)['map'])

inst = val[0]
for det in model.detect(inst.image, inst.proposals)[:5]:
    print(det)
print('region thetas of the first proposal')
print(model.region_thetas(inst.image, inst.proposals[:1])[0])
