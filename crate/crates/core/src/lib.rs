pub mod baselines;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod hypo;
pub mod matcher;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tinynn;

pub use error::{BaselineError, EvalError, GeomError, HypoError, MatchError, NnError, SynthError};
pub use eval::{ApTable, PlaneDetection, PoseErrorSummary, ReportFormat, ReportRow};
pub use geom::{Mat3, Plane, PlanePair, Polygon, Pose, UnitQuaternion, Vec3};
pub use hypo::{Architecture, Fusion, HypothesisSet, NopeSacParams, TrainConfig, Trainer};
pub use matcher::{Match, PlaneMatcher, Prf};
pub use pipeline::{EstimateOptions, Method, SceneEstimate};
pub use synth::{Dataset, ScenePair, SceneConfig};
