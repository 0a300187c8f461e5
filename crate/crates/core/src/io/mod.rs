//! On-disk formats: weight checkpoints, PPM images and model config files.

pub mod config;
pub mod ppm;
pub mod weights;

pub use config::{load_config, parse_config, print_config, ConfigErrorKind, ConfigParseError};
pub use ppm::{encode_ppm, load_ppm, parse_ppm, save_ppm, PpmError, RgbImage};
pub use weights::{
    decode as decode_weights, encode as encode_weights, encoded_len, load_into, read_weights, write_weights,
    NamedTensor, Precision, WeightFileError,
};
