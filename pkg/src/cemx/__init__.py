"""Exploration toolkit for the space of high-resolution images consistent
with a given low-resolution input."""

from .cem import (CemOperator, build_cem, build_dense_oracle, cem_apply,
                  cem_apply_padded, consistency_residual, degrade,
                  project_nullspace, project_perp, swap_kernel)
from .errors import (Busy, CalibrationError, CemxError, EmptyRegion,
                     EstimationError, GraphShapeError, InvalidDims,
                     InvalidParam, IoError, KernelFormatError, NothingToUndo,
                     OracleTooLarge, SingularKernel)
from .explorer import (Session, diverse_alternatives, diversity_metric,
                       export_session, new_session, psnr, rmse, run_edit,
                       set_knobs, undo)
from .generator import (GeneratorParams, direct_param, generate,
                        generate_on_tape, identity_params, toy_params)
from .imagekit import (BoundaryMode, conv2d, downsample, load_image,
                       save_image, upsample, validate_image, validate_mask)
from .kernels import (InvFilter, Kernel, bicubic_kernel, delta_kernel,
                      gaussian_kernel, invert_composed, load_kernel,
                      save_kernel)
from .losses import (LinearCritic, LossWeights, PercentileCalibration,
                     StructureTensor, calibrate_percentiles, compose_sd,
                     compute_st, credibility_gate, map_loss, range_loss,
                     struct_loss)
from .objectives import EditJobSpec, Scribble, rasterize_polygon, rle_decode, \
    rle_encode, region_to_mask
from .tape import Tape, grad_check

__version__ = "0.1.0"
