"""Polar control-point document dewarping.

Sparse 4-channel mapping points and equal-angle contour radii describe a
page deformation; a family of radial-overlap losses with analytic gradients
fits them, a thin plate spline densifies them into a backward map, and
bilinear resampling produces the dewarped image.
"""

from .geometry import (
    ContourSet,
    EdgeLengths,
    MappingGrid,
    augment_grid,
    contour_resample,
    contours_from_grid,
    edge_lengths,
    from_polar,
    grid_rings,
    regular_lattice,
    ring_indices,
    to_polar,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    diff_loss,
    doc_iou_discrete,
    edge_loss,
    focal_wrap,
    global_iou_loss,
    gradient_check,
    grid_edge_loss,
    local_iou_loss,
    polar_iou_integral,
    shape3d_loss,
    smooth_l1,
    total_loss,
)
from .warp import (
    BackwardMap,
    ThinPlateSpline,
    build_backward_map,
    invert_deformation,
    pixel_centers,
    resample,
    sample_bilinear,
)
from .synth import (
    DeformationSpec,
    SynthSample,
    make_background,
    make_deformation,
    make_flat_document,
    make_suite,
    render_sample,
)
from .fit import ControlPointFitter, DewarpPredictor, FitDivergenceError, dewarp_image
from .metrics import MetricReport, ad_simplified, cer, edit_distance, ld_exact, ms_ssim
from .checks import run_gradient_checks

__version__ = "0.1.0"

__all__ = [
    "BackwardMap",
    "ContourSet",
    "ControlPointFitter",
    "DeformationSpec",
    "DewarpPredictor",
    "EdgeLengths",
    "FitDivergenceError",
    "LossBreakdown",
    "LossWeights",
    "MappingGrid",
    "MetricReport",
    "SynthSample",
    "ThinPlateSpline",
    "ad_simplified",
    "augment_grid",
    "build_backward_map",
    "cer",
    "contour_resample",
    "contours_from_grid",
    "dewarp_image",
    "diff_loss",
    "doc_iou_discrete",
    "edge_lengths",
    "edge_loss",
    "edit_distance",
    "focal_wrap",
    "from_polar",
    "global_iou_loss",
    "gradient_check",
    "grid_edge_loss",
    "grid_rings",
    "invert_deformation",
    "ld_exact",
    "local_iou_loss",
    "make_background",
    "make_deformation",
    "make_flat_document",
    "make_suite",
    "ms_ssim",
    "pixel_centers",
    "polar_iou_integral",
    "regular_lattice",
    "render_sample",
    "resample",
    "ring_indices",
    "run_gradient_checks",
    "sample_bilinear",
    "shape3d_loss",
    "smooth_l1",
    "to_polar",
    "total_loss",
]
