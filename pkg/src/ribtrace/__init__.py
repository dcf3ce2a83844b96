"""Rib centerline extraction and labeling from 4-class probability volumes."""

from .centerline import (
    CenterlineSet,
    RibCenterline,
    dilate_to_mask,
    load_centerlines,
    point_to_polyline_distance,
    resample_arclength,
    save_centerlines,
    spline_interpolate,
)
from .evalbench import EvalReport, build_report, match_centerlines, missed_ribs
from .phantom import PhantomSpec, generate
from .probmap import (
    LabelGrid,
    argmax_labels,
    combined_probability,
    merge_rib_classes,
    voxel_metrics,
)
from .tracer import (
    RibCageBox,
    RibCageNotFound,
    RibsNotFound,
    TraceParams,
    TraceState,
    detect_bounding_box,
    extract_all,
    find_neighbor_rib,
    initial_rib_detection,
    label_ribs,
    principal_direction,
    trace_rib,
)
from .volgrid import (
    ProbabilityMap,
    VoxelGrid,
    read_rvf,
    resample_isotropic,
    sample_trilinear,
    world_of,
    write_rvf,
)

__version__ = "0.1.0"
