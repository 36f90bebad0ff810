//! Self-checks shared by the `selftest` command and the acceptance suite.

mod checks;
mod composites;
mod gradients;
mod tiny;

pub use checks::{
    autodiff, generate_determinism, neutrality, recipes, sampler_oracle, selftest, v_identity, Check,
};
pub use composites::{composite_sweep, COMPOSITES};
pub use gradients::{primitive_names, primitive_sweep};
pub use tiny::{tiny_config, tiny_models, TINY_FRAMES, TINY_STEPS};
