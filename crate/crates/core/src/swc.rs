//! Sliding-window crop: a deterministic grid of overlapping square patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    /// Side `H / (n_w + 1)`, stride half the side. Covers only the top-left
    /// part of the image.
    PaperLiteral,
    /// Side `2H / (n_w + 1)`, stride half the side, last row and column
    /// aligned to the image edge. Covers every pixel. On small images where
    /// flooring would leave a gap before the snapped edge, the offsets are
    /// spread evenly over `[0, H - side]` instead.
    #[default]
    FullCoverage,
}

impl std::fmt::Display for CropMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CropMode::PaperLiteral => "paper-literal",
            CropMode::FullCoverage => "full-coverage",
        })
    }
}

impl std::str::FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(CropMode::PaperLiteral),
            "full-coverage" => Ok(CropMode::FullCoverage),
            other => Err(Error::Config(format!("unknown crop mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub i: usize,
    /// Top row.
    pub e: usize,
    /// Left column.
    pub f: usize,
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub n: usize,
    pub mode: CropMode,
    pub per_row: usize,
    pub side: usize,
    pub stride: usize,
    pub patches: Vec<Patch>,
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Lays out `n` patches over an `height x width` image.
pub fn plan(height: usize, width: usize, n: usize, mode: CropMode) -> Result<PatchPlan> {
    if height != width {
        return Err(Error::Config(format!(
            "sliding-window crop needs a square image, got {height}x{width}"
        )));
    }
    let per_row = exact_sqrt(n)
        .ok_or_else(|| Error::Config(format!("patch count {n} is not a perfect square")))?;
    if per_row < 2 {
        return Err(Error::Config(format!("patch count must be at least 4, got {n}")));
    }
    let side = match mode {
        CropMode::PaperLiteral => height / (per_row + 1),
        CropMode::FullCoverage => 2 * height / (per_row + 1),
    };
    if side < 2 {
        return Err(Error::Config(format!(
            "patch side {side} too small for a {height}-pixel image with n = {n}"
        )));
    }
    let stride = side / 2;
    let mut slots: Vec<usize> = (0..per_row).map(|k| k * stride).collect();
    if mode == CropMode::FullCoverage {
        slots[per_row - 1] = height - side;
        if slots.windows(2).any(|w| w[1] - w[0] > side) {
            let span = height - side;
            let gaps = per_row - 1;
            slots = (0..per_row).map(|k| (k * span + gaps / 2) / gaps).collect();
        }
    }
    let place = |slot: usize| slots[slot];
    let patches = (0..n)
        .map(|i| Patch {
            i,
            e: place(i / per_row),
            f: place(i % per_row),
            side,
        })
        .collect();
    Ok(PatchPlan {
        height,
        width,
        n,
        mode,
        per_row,
        side,
        stride,
        patches,
    })
}

fn check_image(img: &Tensor, plan: &PatchPlan) -> Result<(usize, usize, usize)> {
    let (c, h, w) = img.chw()?;
    if h != plan.height || w != plan.width {
        return Err(Error::Shape(format!(
            "image is {h}x{w}, plan was built for {}x{}",
            plan.height, plan.width
        )));
    }
    Ok((c, h, w))
}

/// Cuts `img` (`c x H x W`) into the planned patches, in patch-index order.
pub fn extract(img: &Tensor, plan: &PatchPlan) -> Result<Vec<Tensor>> {
    let (c, h, w) = check_image(img, plan)?;
    let data = img.data();
    Ok(plan
        .patches
        .iter()
        .map(|p| {
            let mut out = Vec::with_capacity(c * p.side * p.side);
            for ch in 0..c {
                for row in p.e..p.e + p.side {
                    let start = ch * h * w + row * w + p.f;
                    out.extend_from_slice(&data[start..start + p.side]);
                }
            }
            Tensor::from_parts(vec![c, p.side, p.side], out)
        })
        .collect())
}

/// Adjoint of [`extract`]: sums patch-shaped values back into image space.
pub fn scatter_add(patches: &[Tensor], plan: &PatchPlan, channels: usize) -> Result<Tensor> {
    if patches.len() != plan.patches.len() {
        return Err(Error::Shape(format!(
            "{} patch tensors for a plan with {} patches",
            patches.len(),
            plan.patches.len()
        )));
    }
    let (h, w) = (plan.height, plan.width);
    let mut out = vec![0.0; channels * h * w];
    for (p, t) in plan.patches.iter().zip(patches) {
        if t.shape() != [channels, p.side, p.side] {
            return Err(Error::Shape(format!(
                "patch {} has shape {:?}, expected {:?}",
                p.i,
                t.shape(),
                [channels, p.side, p.side]
            )));
        }
        let src = t.data();
        for ch in 0..channels {
            for r in 0..p.side {
                let dst = ch * h * w + (p.e + r) * w + p.f;
                let s = (ch * p.side + r) * p.side;
                for col in 0..p.side {
                    out[dst + col] += src[s + col];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![channels, h, w], out))
}

/// Number of patches covering each pixel, as an `H x W` row-major grid.
pub fn coverage(plan: &PatchPlan) -> Vec<usize> {
    let mut count = vec![0usize; plan.height * plan.width];
    for p in &plan.patches {
        for r in p.e..p.e + p.side {
            for c in p.f..p.f + p.side {
                count[r * plan.width + c] += 1;
            }
        }
    }
    count
}
