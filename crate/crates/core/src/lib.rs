//! Desk-scale masked-language-model pretraining with token dropping and
//! semantic-consistency training, plus the measurement tools to study both.

// The op graph allocates and frees multi-megabyte activation buffers every
// step; glibc serves those straight from mmap and returns them on free, so
// each step pays the page faults again. mimalloc keeps the segments cached.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod router;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Deterministic seed derivation: absorbs `tag` and `index` into `base`
/// through a bijective mixer, so each (tag, index) pair names its own
/// independent random stream and nothing depends on call order.
pub fn mix_seed(base: u64, tag: u64, index: u64) -> u64 {
    fn smix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    smix(smix(smix(base) ^ tag) ^ index)
}
