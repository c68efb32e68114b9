//! Reference architectures for the fusion, CI-inference and discriminator
//! networks.

use serde::{Deserialize, Serialize};

use super::network::{NetBuilder, NetSpec};
use crate::error::{Error, Result};

/// Channel plan shared by the three networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Width of the two feature-extraction branches.
    pub feature_width: usize,
    /// Width of the trunk after concatenation.
    pub trunk_width: usize,
    pub disc_width: usize,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            feature_width: 32,
            trunk_width: 64,
            disc_width: 32,
            leaky_slope: 0.2,
        }
    }
}

fn up_steps(factor: usize) -> Result<usize> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Invalid(format!(
            "resolution ratio {factor} must be a power of two for the reference architecture"
        )));
    }
    Ok(factor.trailing_zeros() as usize)
}

/// Two-branch encoder, concatenation, residual trunk, projection to
/// `out_bands`. Inputs: 0 = LRHS image (`lr_bands`), 1 = HRLS image
/// (`hr_bands`); the LRHS side is `factor` times smaller spatially.
///
/// With `final_relu` this is the fusion network; without it, the CI network.
pub fn two_branch_net(
    name: &str,
    lr_bands: usize,
    hr_bands: usize,
    out_bands: usize,
    factor: usize,
    cfg: &ArchConfig,
    final_relu: bool,
) -> Result<NetSpec> {
    let steps = up_steps(factor)?;
    let (fw, tw, s) = (cfg.feature_width, cfg.trunk_width, cfg.leaky_slope);
    let mut b = NetBuilder::new(name, 2);

    // LRHS branch: two convolutions, then ×2 up-convolutions to full size.
    let mut lr = b.input(0);
    lr = b.conv(lr, lr_bands, fw);
    lr = b.leaky(lr, s);
    lr = b.conv(lr, fw, fw);
    lr = b.leaky(lr, s);
    for _ in 0..steps {
        lr = b.up(lr, fw, fw, 2);
        lr = b.leaky(lr, s);
    }

    // HRLS branch: two convolutions, a down-convolution and an
    // up-convolution back to full size.
    let mut hr = b.input(1);
    hr = b.conv(hr, hr_bands, fw);
    hr = b.leaky(hr, s);
    hr = b.conv(hr, fw, fw);
    hr = b.leaky(hr, s);
    hr = b.down(hr, fw, fw, 2);
    hr = b.leaky(hr, s);
    hr = b.up(hr, fw, fw, 2);
    hr = b.leaky(hr, s);

    let cat = b.concat(lr, hr);
    let t1 = b.conv(cat, 2 * fw, tw);
    let t1 = b.leaky(t1, s);
    let t2 = b.conv(t1, tw, tw);
    let t2 = b.leaky(t2, s);
    let t3 = b.conv(t2, tw, tw);
    let t3 = b.leaky(t3, s);
    let s1 = b.add(t1, t3);
    let t4 = b.conv(s1, tw, tw);
    let t4 = b.leaky(t4, s);
    let s2 = b.add(s1, t4);
    let mut out = b.conv(s2, tw, out_bands);
    if final_relu {
        out = b.relu(out);
    }
    Ok(b.finish(out))
}

pub fn fusion_net(lr_bands: usize, hr_bands: usize, out_bands: usize, factor: usize, cfg: &ArchConfig) -> Result<NetSpec> {
    two_branch_net("fusion", lr_bands, hr_bands, out_bands, factor, cfg, true)
}

pub fn ci_net(lr_bands: usize, hr_bands: usize, out_bands: usize, factor: usize, cfg: &ArchConfig) -> Result<NetSpec> {
    two_branch_net("ci", lr_bands, hr_bands, out_bands, factor, cfg, false)
}

/// Three stride-2 down-convolutions, two flat convolutions, sigmoid map.
pub fn discriminator(bands: usize, cfg: &ArchConfig) -> NetSpec {
    let (w, s) = (cfg.disc_width, cfg.leaky_slope);
    let mut b = NetBuilder::new("discriminator", 1);
    let mut x = b.input(0);
    x = b.down(x, bands, w, 2);
    x = b.leaky(x, s);
    x = b.down(x, w, w, 2);
    x = b.leaky(x, s);
    x = b.down(x, w, w, 2);
    x = b.leaky(x, s);
    x = b.conv(x, w, w);
    x = b.leaky(x, s);
    x = b.conv(x, w, 1);
    x = b.sigmoid(x);
    b.finish(x)
}
