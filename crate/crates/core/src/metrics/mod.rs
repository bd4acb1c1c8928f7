//! Image quality (PSNR, SSIM) and cost accounting (FLOPs, parameters).
//!
//! Cost is computed from a [`ModelDesc`], a flat list of layers whose channel
//! counts are either fixed or follow the evaluation width. Counting is exact
//! integer arithmetic; one multiply-accumulate counts as two FLOPs, and
//! activations and additions are ignored.

mod quality;

pub use quality::{psnr, ssim, PSNR_CAP, SSIM_WINDOW};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel count of one side of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channels {
    Fixed(usize),
    /// Follows the evaluation width `ρ`; `ω` when counting stored parameters.
    Width,
}

impl Channels {
    fn at(self, width: usize) -> usize {
        match self {
            Channels::Fixed(n) => n,
            Channels::Width => width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Same-padded convolution applied at every pixel.
    Conv { kernel: usize },
    /// Dense layer applied once per image.
    Linear,
}

/// Functional grouping used to report sub-totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    Encoder,
    Head,
    Transform,
    Trunk,
    Tail,
    Selector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub group: LayerGroup,
    pub kind: LayerKind,
    pub in_ch: Channels,
    pub out_ch: Channels,
    pub bias: bool,
}

impl LayerDesc {
    pub fn conv(name: impl Into<String>, group: LayerGroup, kernel: usize, in_ch: Channels, out_ch: Channels, bias: bool) -> Self {
        Self {
            name: name.into(),
            group,
            kind: LayerKind::Conv { kernel },
            in_ch,
            out_ch,
            bias,
        }
    }

    pub fn linear(name: impl Into<String>, group: LayerGroup, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            group,
            kind: LayerKind::Linear,
            in_ch: Channels::Fixed(d_in),
            out_ch: Channels::Fixed(d_out),
            bias,
        }
    }

    fn params(&self, omega: usize) -> u64 {
        let (ci, co) = (self.in_ch.at(omega) as u64, self.out_ch.at(omega) as u64);
        let taps = match self.kind {
            LayerKind::Conv { kernel } => (kernel * kernel) as u64,
            LayerKind::Linear => 1,
        };
        ci * co * taps + if self.bias { co } else { 0 }
    }

    fn flops(&self, width: usize, height: usize, img_width: usize) -> u64 {
        let (ci, co) = (self.in_ch.at(width) as u64, self.out_ch.at(width) as u64);
        match self.kind {
            LayerKind::Conv { kernel } => 2 * (kernel * kernel) as u64 * ci * co * (height * img_width) as u64,
            LayerKind::Linear => 2 * ci * co,
        }
    }
}

/// Layer list plus the maximum width of the shared store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDesc {
    pub omega: usize,
    pub layers: Vec<LayerDesc>,
}

impl ModelDesc {
    /// Concatenation of two descriptions sharing the same `ω`.
    pub fn merged(&self, other: &ModelDesc) -> Result<ModelDesc> {
        if self.omega != other.omega {
            return Err(Error::Config(format!(
                "cannot merge descriptions with omega {} and {}",
                self.omega, other.omega
            )));
        }
        Ok(ModelDesc {
            omega: self.omega,
            layers: self.layers.iter().chain(&other.layers).cloned().collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub group: LayerGroup,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub width: usize,
    pub height: usize,
    pub image_width: usize,
    pub flops: u64,
    pub params: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn group_flops(&self, group: LayerGroup) -> u64 {
        self.layers.iter().filter(|l| l.group == group).map(|l| l.flops).sum()
    }
}

/// FLOPs of one forward pass at width `width` on an `height × image_width`
/// image, with the per-layer breakdown. Parameters are always the full
/// stored count.
pub fn count_flops(desc: &ModelDesc, width: usize, height: usize, image_width: usize) -> Result<CostReport> {
    if width == 0 || width > desc.omega {
        return Err(Error::Width(format!("width {width} outside 1..={}", desc.omega)));
    }
    let layers: Vec<LayerCost> = desc
        .layers
        .iter()
        .map(|l| LayerCost {
            name: l.name.clone(),
            group: l.group,
            flops: l.flops(width, height, image_width),
            params: l.params(desc.omega),
        })
        .collect();
    Ok(CostReport {
        width,
        height,
        image_width,
        flops: layers.iter().map(|l| l.flops).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        layers,
    })
}

/// Total stored parameters.
pub fn count_params(desc: &ModelDesc) -> u64 {
    desc.layers.iter().map(|l| l.params(desc.omega)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(omega: usize) -> ModelDesc {
        ModelDesc {
            omega,
            layers: vec![LayerDesc::conv("c", LayerGroup::Trunk, 3, Channels::Width, Channels::Width, true)],
        }
    }

    #[test]
    fn single_conv_flops() {
        let r = count_flops(&single(64), 64, 32, 32).unwrap();
        assert_eq!(r.flops, 75_497_472);
    }

    #[test]
    fn single_conv_params() {
        assert_eq!(count_params(&single(64)), 36_928);
        assert_eq!(count_flops(&single(64), 38, 8, 8).unwrap().params, 36_928);
    }

    #[test]
    fn linear_flops() {
        let d = ModelDesc {
            omega: 4,
            layers: vec![LayerDesc::linear("l", LayerGroup::Selector, 8, 5, true)],
        };
        let r = count_flops(&d, 2, 100, 100).unwrap();
        assert_eq!(r.flops, 80);
        assert_eq!(r.params, 45);
    }

    #[test]
    fn width_out_of_range() {
        assert!(count_flops(&single(8), 9, 4, 4).is_err());
        assert!(count_flops(&single(8), 0, 4, 4).is_err());
    }
}
