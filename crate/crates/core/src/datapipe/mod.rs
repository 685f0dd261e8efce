//! Manifest ingestion, duplicate removal, patient-disjoint splits, balanced
//! sampling, augmentation and image decoding.

mod augment;
mod image_io;
mod manifest;
mod sampler;
mod split;
mod toy;

pub use augment::{
    adjust_brightness, adjust_contrast, adjust_hue, adjust_saturation, augment, resample_box, resize_bilinear, AugmentConfig,
};
pub use image_io::{load_image, rgb_to_tensor, save_image, tensor_to_rgb, DirSource, ImageSource, MemorySource};
pub use manifest::{parse_id_list, read_id_list, DedupReport, Manifest, SampleRecord, Sex, COLUMNS};
pub use sampler::{BalancedSampler, SamplerState};
pub use split::{patient_split, SideCounts, Split, SplitSummary};
pub use toy::{toy_dataset, write_toy_dataset};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// An independent generator for one coordinate (for example phase, epoch,
/// step and batch slot) under a run seed. Results never depend on the order
/// or thread in which substreams are created.
pub fn substream(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    // splitmix64 fold of the coordinates selects the ChaCha stream
    let mut z = 0x9e37_79b9_7f4a_7c15u64;
    for &c in coords {
        z = (z ^ c).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(z);
    rng
}
