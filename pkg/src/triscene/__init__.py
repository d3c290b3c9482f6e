"""Semantic voxel scene generation with triplane diffusion.

Two-stage pipeline: a triplane autoencoder compresses labeled voxel scenes
into three 2D feature planes, and a DDPM over rolled triplanes generates new
ones. Trimask manipulation extends the sampler to inpainting, tiled
outpainting and refinement of degraded scene-completion predictions.
"""

from .checkpoint import (load_autoencoder, load_checkpoint, load_diffusion, load_refiner,
                         save_autoencoder, save_checkpoint, save_diffusion, save_refiner)
from .codec import (ImplicitDecoder, SceneEncoder, Triplane, TriplaneAutoencoder, ae_loss,
                    lovasz_softmax_loss, positional_encoding, sample_triplane,
                    weighted_ce_loss)
from .diffusion import (NoiseSchedule, RollLayout, TriplaneDiffusion, TriplaneUNet,
                        diffusion_loss, forward_step, make_schedule, posterior_step,
                        q_sample, roll_triplane, sample_rolled, unroll_triplane)
from .exceptions import CheckpointFormatError, SceneFormatError, TrainingDivergedError
from .manipulation import (BoxRegion, SceneCanvas, SscRefiner, Trimask,
                           fully_preserved_voxels, inpaint, load_canvas, outpaint,
                           repaint_schedule, save_canvas, stitch, trimask_from_boxes)
from .metrics import (class_histogram_divergence, completion_iou, confusion_table, miou,
                      read_metric_report, write_metric_report)
from .scenes import (ClassWeights, SemanticGrid, compute_class_weights, corrupt_scene,
                     generate_toy_scene, load_scene, load_semantickitti_voxels,
                     render_topdown, save_scene)
from .seeds import derive_seed

__version__ = "0.1.0"

__all__ = [
    "BoxRegion", "CheckpointFormatError", "ClassWeights", "ImplicitDecoder",
    "NoiseSchedule", "RollLayout", "SceneCanvas", "SceneEncoder", "SceneFormatError",
    "SemanticGrid", "SscRefiner", "TrainingDivergedError", "Trimask", "Triplane",
    "TriplaneAutoencoder", "TriplaneDiffusion", "TriplaneUNet", "ae_loss",
    "class_histogram_divergence", "completion_iou", "compute_class_weights",
    "confusion_table", "corrupt_scene", "derive_seed", "diffusion_loss", "forward_step",
    "fully_preserved_voxels", "generate_toy_scene", "inpaint", "load_autoencoder",
    "load_canvas", "load_checkpoint", "load_diffusion", "load_refiner", "load_scene",
    "load_semantickitti_voxels", "lovasz_softmax_loss", "make_schedule", "miou",
    "outpaint", "positional_encoding", "posterior_step", "q_sample",
    "read_metric_report", "render_topdown", "repaint_schedule", "roll_triplane",
    "sample_rolled", "sample_triplane", "save_autoencoder", "save_canvas",
    "save_checkpoint", "save_diffusion", "save_refiner", "save_scene", "stitch",
    "trimask_from_boxes", "unroll_triplane", "weighted_ce_loss", "write_metric_report",
]
