"""Multi-view consistent inpainting of 3D Gaussian scenes with diffusion guidance."""

from .config import PipelineConfig, load_config, parse_config
from .diffusion import (AfpContext, Condition, NoiseSchedule, afp_blend, ddim_invert, ddim_sample,
                        inpaint_multiview, self_attention)
from .errors import ConfigError, NumericError, SceneError, SplatfillError, ValidationError
from .losses import (LossWeights, depth_loss, dssim_loss, l1_loss, rgb_loss, sds_grad,
                     tg_sds_grad, total_loss)
from .metrics import MetricsReport, eval_metrics, psnr
from .optim import OptimState, adam_step
from .pipeline import StageReport, run_coarse, run_fine, run_pipeline
from .renderer import Gaussian3D, GaussianCloud, rasterize, render_backward
from .scene_io import (CameraIntrinsics, CameraPose, InpaintPrompts, SceneBundle, View,
                       camera_center, load_scene, parse_colmap_text)
from .score_models import PointTarget, TinyAttentionUNet
from .view_select import ClusterAssignment, ReferenceSet, kmeans, select_references
from .warp import WarpResult, align_depth_least_squares, build_conditions, canny_edges, warp_view

__version__ = "0.1.0"
