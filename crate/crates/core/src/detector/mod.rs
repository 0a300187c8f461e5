//! The assembled detector: graph construction, forward pass, box decoding,
//! non-maximum suppression and letterboxed whole-image inference.
//!
//! Graph, finest output first:
//!
//! ```text
//! stem CBS 3x3/2
//! stage 1..4: down (EADown) -> n x EAConv          strides 4, 8, 16, 32
//! SPPF on stage 4
//! neck  top-down:  up(P5) ++ C4 -> fuse -> T4;  up(T4) ++ C3 -> fuse -> O3
//!       bottom-up: down(O3) ++ T4 -> fuse -> O4; down(O4) ++ P5 -> fuse -> O5
//! heads on O3, O4, O5 (strides 8, 16, 32)
//! ```

mod config;
mod letterbox;
mod model;
mod postprocess;

pub use config::{ConvBlockKind, DownBlockKind, InvalidConfig, ModelConfig, NUM_STAGES};
pub use letterbox::{Letterbox, PAD_VALUE};
pub use model::{ConvBlock, DownBlock, Head, Model, Neck, RawPrediction, Stage, BOX_BIAS_INIT, CLASS_PRIOR, STRIDES};
pub use postprocess::{decode, decode_item, iou, nms, nms_order, BBox, Detection};

use crate::error::{Error, Result};
use crate::io::ppm::RgbImage;

/// Letterbox, forward, decode, suppress, and map boxes back to `image`
/// pixels.
pub fn infer_image(model: &Model, image: &RgbImage, conf: f32, iou_threshold: f64) -> Result<Vec<Detection>> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::Input("image is empty".into()));
    }
    let lb = Letterbox::new(image.width, image.height, model.cfg.input_size);
    let raw = model.forward(&lb.apply(image))?;
    let kept = nms(&decode_item(&raw, 0, conf), iou_threshold);
    Ok(kept
        .into_iter()
        .filter_map(|d| {
            let bbox = lb.inverse(&d.bbox);
            bbox.is_valid().then_some(Detection { bbox, ..d })
        })
        .collect())
}
