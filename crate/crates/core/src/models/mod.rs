//! Desk-scale classification and depth-completion models.

pub mod cls;
pub mod depth;
pub mod losses;

use serde::{Deserialize, Serialize};

pub use cls::{cls_forward, cls_forward_t, ClsConfig, ClsParams};
pub use depth::{dc_forward, dc_forward_t, DcOutput, DepthConfig, DepthParams, RpssbParams};
pub use losses::{charbonnier_loss, cross_entropy, rmse_mae_valid, topk_accuracy, CHARBONNIER_EPS};

/// Mask-aware model or its mask-unaware baseline with the same weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Pvm,
    Vm,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Pvm => "pvm",
            Variant::Vm => "vm",
        }
    }
}
