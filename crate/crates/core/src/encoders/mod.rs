//! Spatial and temporal encoders.

mod attention;
pub mod checkpoint;
pub mod ltae;
mod pe;
pub mod pse;
pub mod utae;

pub use attention::AttentionMaps;
pub use checkpoint::{load_params, save_params};
pub use ltae::{ltae_forward, Ltae, LtaeConfig, LtaeOutput};
pub use pe::positional_encoding;
pub use pse::{gather_pixel_set, pse_forward, sample_pixels, PixelSetConfig, PixelSetEncoder};
pub use utae::{utae_forward, Utae, UtaeConfig, UtaeOutput};
