//! Neural-network plumbing shared by the localizer and the CycleGAN: seeded
//! parameter storage, layers candle does not differentiate out of the box, an
//! Adam optimizer with persistent state, and checkpoint containers.

mod adam;
mod checkpoint;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{
    bilinear_matrix, instance_norm, max_pool_3x3_s2, reflect_pad2d, upsample_bilinear, BatchNorm2d, LayerNorm,
    Upsampler,
};
pub use params::{is_buffer, ParamStore};

pub use candle_core::Device;

use crate::error::{Error, Result};

/// Environment variable consulted when no device is given explicitly.
pub const DEVICE_ENV: &str = "PIPETTELOC_DEVICE";

/// Parses `cpu`, `cuda` or `cuda:N`; `None` falls back to [`DEVICE_ENV`], then CPU.
pub fn select_device(name: Option<&str>) -> Result<Device> {
    let from_env = std::env::var(DEVICE_ENV).ok();
    let name = name.or(from_env.as_deref()).unwrap_or("cpu");
    match name {
        "cpu" => Ok(Device::Cpu),
        "cuda" => Ok(Device::new_cuda(0)?),
        other => match other.strip_prefix("cuda:").and_then(|i| i.parse().ok()) {
            Some(ordinal) => Ok(Device::new_cuda(ordinal)?),
            None => Err(Error::config("device", format!("unknown device `{other}`"))),
        },
    }
}

/// Short label for reports.
pub fn device_label(device: &Device) -> String {
    match device {
        Device::Cpu => "cpu".into(),
        Device::Cuda(_) => "cuda".into(),
        Device::Metal(_) => "metal".into(),
    }
}
