"""Point-transformation pipeline for self-supervised depth learning."""

from .errors import FormatError, InternalError, InvalidInput
from .geometry import (DepthMap, Intrinsics, PointCloud, ProjectionOutcome,
                       Registration, RigidTransform, Status, inverse_project,
                       invert, project, raster_index, transform)
from .losses import (Frame, Image, LossBreakdown, LossWeights, OcclusionMode,
                     negative_depth_loss, point_loss, reconstruct_and_image_loss,
                     ssim_loss, total_loss)
from .zbuffer import (ZBufferResult, heuristic_filter, register,
                      zbuffer_parallel, zbuffer_serial_oracle)

__version__ = "0.1.0"
