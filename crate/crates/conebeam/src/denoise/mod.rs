//! The learnable proximal replacement: a small 2D U-Net, its training loop,
//! the Adam optimizer, and the patch pipeline.

mod adam;
mod patches;
mod train;
mod unet;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use patches::{extract_patches, reassemble_patches, PatchMeta, PatchSet, Patches};
pub use train::{mse_loss, percentile, train_stage, TrainConfig, TrainOutcome};
pub use unet::{
    unet_backward, unet_forward, unet_loss_grad, ConvLayer, DenoiserParams, Gradients, UNetArch,
};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Volume3D;

const PARAMS_FORMAT_VERSION: u32 = 1;

/// Loaded stage denoisers keyed by id; what [`crate::solvers::hqs_reconstruct`]
/// resolves its stage references against.
#[derive(Clone, Debug, Default)]
pub struct DenoiserBank {
    map: BTreeMap<String, DenoiserParams>,
}

impl DenoiserBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, params: DenoiserParams) {
        self.map.insert(id.into(), params);
    }

    pub fn get(&self, id: &str) -> Option<&DenoiserParams> {
        self.map.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.map.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

/// Apply the denoiser to every axial slice independently: the volume is
/// scaled by 1/norm_scale, each slice is zero-padded up to the next multiple
/// of 2^depth, pushed through the network, cropped back, and rescaled.
/// Dims are preserved.
pub fn apply_denoiser_volume(params: &DenoiserParams, vol: &Volume3D) -> Result<Volume3D> {
    params.validate()?;
    let (nx, ny, _nz) = vol.dims;
    let div = 1usize << params.arch.depth;
    let pw = nx.div_ceil(div) * div;
    let ph = ny.div_ceil(div) * div;
    let scale = if params.norm_scale > 0.0 && params.norm_scale.is_finite() {
        params.norm_scale
    } else {
        1.0
    };
    let inv = 1.0 / scale;

    let mut out = Volume3D::zeros(vol.dims, vol.voxel_size);
    out.data
        .par_chunks_mut(nx * ny)
        .enumerate()
        .try_for_each(|(k, out_slice)| -> Result<()> {
            let src = vol.slice(k);
            let mut padded = vec![0.0f64; ph * pw];
            for r in 0..ny {
                for c in 0..nx {
                    padded[r * pw + c] = src[r * nx + c] * inv;
                }
            }
            let run = unet_forward(params, &padded, ph, pw)?;
            for r in 0..ny {
                for c in 0..nx {
                    out_slice[r * nx + c] = run[r * pw + c] * scale;
                }
            }
            Ok(())
        })?;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    format_version: u32,
    depth: usize,
    base_channels: usize,
    kernel_size: usize,
    norm_scale: f64,
}

/// Serialize: a one-line UTF-8 JSON descriptor (format version, architecture,
/// normalization scale) followed by the little-endian float32 tensors in
/// declaration order (weights then bias per layer).
pub fn save_denoiser(path: &Path, params: &DenoiserParams) -> Result<()> {
    params.validate()?;
    let header = ParamsHeader {
        format_version: PARAMS_FORMAT_VERSION,
        depth: params.arch.depth,
        base_channels: params.arch.base_channels,
        kernel_size: params.arch.kernel_size,
        norm_scale: params.norm_scale,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    for conv in &params.convs {
        for &v in conv.weights.iter().chain(&conv.bias) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Format("denoiser file has no header terminator".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 4096 {
            return Err(Error::Format("denoiser header exceeds 4096 bytes".into()));
        }
    }
    let header: ParamsHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("denoiser header: {e}")))?;
    if header.format_version != PARAMS_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported denoiser format version {}",
            header.format_version
        )));
    }
    let arch = UNetArch {
        depth: header.depth,
        base_channels: header.base_channels,
        kernel_size: header.kernel_size,
    };
    let mut params = DenoiserParams::zeros(arch)?;
    params.norm_scale = header.norm_scale;
    let n = params.n_parameters();
    let mut payload = Vec::with_capacity(n * 4);
    r.read_to_end(&mut payload)?;
    if payload.len() != n * 4 {
        return Err(Error::Format(format!(
            "denoiser payload: expected {} bytes for {n} parameters, got {}",
            n * 4,
            payload.len()
        )));
    }
    let mut vals = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for conv in &mut params.convs {
        for v in conv.weights.iter_mut().chain(conv.bias.iter_mut()) {
            *v = vals.next().expect("length checked");
        }
    }
    params.validate()?;
    Ok(params)
}
