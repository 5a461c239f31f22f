# Configuration and model
from .conf import ExperimentConfig, TrainConfig, runtime_config
from .model import RegionletDetector
from .checkpoint import load_checkpoint, save_checkpoint
# Building blocks
from .selection import RegionOfInterest, cell_init, freeze_mask
from .warp import grid_generate, warp_forward
from .head import Detection, iou, nms
# Benchmark and checks
from .bench import (BenchConfig, generate_dataset, evaluate_map,
                    evaluate_coco_map)
from .gradcheck import central_diff, check_module
# Experiments
from .commands import (cmd_train, cmd_eval, cmd_ablate, cmd_sweep,
                       cmd_gradcheck, cmd_demo_warp, cmd_regions)
