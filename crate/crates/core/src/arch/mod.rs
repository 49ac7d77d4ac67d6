//! Network architecture: block and model specifications, model assembly and
//! parameter-parity calibration.

mod calibrate;
mod model;
mod spec;

pub use calibrate::{
    build_equivalent, calibrate_width, equivalent_spec, relative_gap, Calibration,
    CALIBRATION_DENOMINATOR, PARITY_TOLERANCE,
};
pub use model::{
    build_model, param_count, Binder, BlockOutput, ForwardCtx, LayerInfo, Model, Param, ParamRole,
    ParamStore, Site, SiteKind, StageRef,
};
pub use spec::{
    default_alloc, ArchSpec, InceptionUnitSpec, Ratio, StageSpec, TransitionSpec, Variant,
    TRANSITION_DROPOUT,
};
