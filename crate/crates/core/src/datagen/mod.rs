//! Seeded generators for masks and synthetic datasets.
//!
//! Every sample is a pure function of `(seed, stream, index)`: each index
//! gets its own ChaCha stream, so samples can be produced in any order.

mod fields;
mod masks;
mod shapes;

pub use fields::{gen_depth_field, gen_depth_fields, DepthFieldSpec, DepthSample};
pub use masks::{gen_mask, BrushGrid, MaskPolicy, Regime};
pub use shapes::{gen_shapes_dataset, render_shape, ClsSample, ShapesSpec, SHAPE_NAMES};

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream namespaces, so masks, fields and images never share randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Mask = 1,
    Depth = 2,
    Shapes = 3,
    Sampling = 4,
    Init = 5,
}

/// Generator for item `index` of namespace `stream`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) | index);
    rng
}

/// Dataset description as it appears in configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthSpec {
    DepthFields(DepthFieldSpec),
    ShapesCls(ShapesSpec),
}
