//! Spatial strategies for a universal image perturbation: where it may
//! write ([`Mask`]), how hard ([`PerturbationSpec`]), how it lands on an
//! image ([`UniversalPerturbation::apply`]), and how an optimizer keeps it
//! feasible ([`project`]).
//!
//! All images and deltas are `H×W×3` row-major tensors with values in
//! `[0, 1]`. The mask is a single `H×W` plane shared by all three channels.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Strategy and budget of a universal perturbation.
///
/// Exactly one budget accompanies each strategy: an ℓ∞ bound for the
/// full-image strategy, a patch width for the corner strategy, a frame
/// width for the border strategy. Corner and border amplitudes are free —
/// the final image is still clipped to `[0, 1]` on application.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    /// Additive noise over every pixel, bounded by `epsilon` per channel.
    Pixel { epsilon: f64 },
    /// Four `patch_width`-sized squares, one anchored in each image corner.
    Corner { patch_width: usize },
    /// A `border_width`-wide frame around the image edge.
    Border { border_width: usize },
}

impl PerturbationSpec {
    /// Lower-case strategy name used in artifact headers and reports.
    pub fn strategy_name(self) -> &'static str {
        match self {
            PerturbationSpec::Pixel { .. } => "pixel",
            PerturbationSpec::Corner { .. } => "corner",
            PerturbationSpec::Border { .. } => "border",
        }
    }

    /// The per-entry amplitude bound `project` enforces on the delta.
    pub fn amplitude_bound(self) -> f64 {
        match self {
            PerturbationSpec::Pixel { epsilon } => epsilon,
            _ => 1.0,
        }
    }

    /// Checks the budget against an `H×W` image geometry.
    pub fn validate(self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidBudget(format!("image geometry {h}×{w} is empty")));
        }
        let half = h.min(w) / 2;
        match self {
            PerturbationSpec::Pixel { epsilon } => {
                if !(epsilon > 0.0 && epsilon <= 1.0) {
                    return Err(Error::InvalidBudget(format!(
                        "epsilon {epsilon} outside (0, 1]"
                    )));
                }
            }
            PerturbationSpec::Corner { patch_width } => {
                if patch_width > half {
                    return Err(Error::InvalidBudget(format!(
                        "patch width {patch_width} exceeds half-extent {half} of {h}×{w}"
                    )));
                }
            }
            PerturbationSpec::Border { border_width } => {
                if border_width > half {
                    return Err(Error::InvalidBudget(format!(
                        "border width {border_width} exceeds half-extent {half} of {h}×{w}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An `H×W` binary stencil; 1 marks pixels the perturbation may touch.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Whether pixel `(row, col)` is perturbable.
    #[inline]
    pub fn is_on(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.w + col] != 0
    }

    /// Number of perturbable pixels.
    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b != 0).count()
    }

    /// The mask broadcast over three channels as an `H×W×3` tensor of
    /// zeros and ones, for elementwise products inside a gradient graph.
    pub fn to_channel_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn(vec![self.h, self.w, 3], |i| {
            if self.bits[i / 3] != 0 {
                S::one()
            } else {
                S::zero()
            }
        })
    }
}

/// Builds the binary stencil for `spec` on an `H×W` image.
pub fn build_mask(spec: PerturbationSpec, h: usize, w: usize) -> Result<Mask> {
    spec.validate(h, w)?;
    let on = |row: usize, col: usize| -> bool {
        match spec {
            PerturbationSpec::Pixel { .. } => true,
            PerturbationSpec::Corner { patch_width: p } => {
                (row < p || row >= h - p) && (col < p || col >= w - p)
            }
            PerturbationSpec::Border { border_width: b } => {
                row < b || row >= h - b || col < b || col >= w - b
            }
        }
    };
    let mut bits = vec![0u8; h * w];
    for row in 0..h {
        for col in 0..w {
            bits[row * w + col] = u8::from(on(row, col));
        }
    }
    Ok(Mask { h, w, bits })
}

/// Zeroes `delta` outside the mask and clamps the surviving entries to the
/// spec's amplitude bound. Idempotent; feasible deltas pass through
/// bit-identically.
pub fn project<S: Scalar>(delta: &mut Tensor<S>, spec: PerturbationSpec, mask: &Mask) -> Result<()> {
    check_image_shape("project", delta.shape(), mask)?;
    let bound = S::of_f64(spec.amplitude_bound());
    for (i, v) in delta.data_mut().iter_mut().enumerate() {
        if mask.bits[i / 3] == 0 {
            *v = S::zero();
        } else if *v > bound {
            *v = bound;
        } else if *v < -bound {
            *v = -bound;
        }
    }
    Ok(())
}

/// A single additive perturbation shared across every image it is applied
/// to, together with the strategy that shaped it.
#[derive(Clone, Debug, PartialEq)]
pub struct UniversalPerturbation<S: Scalar> {
    delta: Tensor<S>,
    spec: PerturbationSpec,
    mask: Mask,
}

impl<S: Scalar> UniversalPerturbation<S> {
    /// The all-zero perturbation for `spec` on `H×W` images.
    pub fn zeros(spec: PerturbationSpec, h: usize, w: usize) -> Result<Self> {
        let mask = build_mask(spec, h, w)?;
        Ok(UniversalPerturbation {
            delta: Tensor::zeros(vec![h, w, 3]),
            spec,
            mask,
        })
    }

    /// Wraps an existing delta, enforcing feasibility: `delta` must be an
    /// `H×W×3` tensor, exactly zero outside the mask, and within the
    /// spec's amplitude bound inside it.
    pub fn from_delta(delta: Tensor<S>, spec: PerturbationSpec) -> Result<Self> {
        let (h, w) = image_dims("perturbation", delta.shape())?;
        let mask = build_mask(spec, h, w)?;
        let bound = spec.amplitude_bound();
        for (i, v) in delta.data().iter().enumerate() {
            let (row, col) = (i / 3 / w, i / 3 % w);
            if mask.bits[i / 3] == 0 {
                if *v != S::zero() {
                    return Err(Error::shape(
                        "perturbation",
                        format!("nonzero delta {v} outside the mask at ({row}, {col})"),
                    ));
                }
            } else if v.as_f64().abs() > bound {
                return Err(Error::InvalidBudget(format!(
                    "delta {v} at ({row}, {col}) exceeds amplitude bound {bound}"
                )));
            }
        }
        Ok(UniversalPerturbation { delta, spec, mask })
    }

    pub fn delta(&self) -> &Tensor<S> {
        &self.delta
    }

    /// Mutable delta access for the optimizer that owns this perturbation.
    /// Callers are expected to re-[`project`] after writing.
    pub fn delta_mut(&mut self) -> &mut Tensor<S> {
        &mut self.delta
    }

    pub fn spec(&self) -> PerturbationSpec {
        self.spec
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Re-applies the feasibility projection after a raw delta update.
    pub fn project(&mut self) -> Result<()> {
        project(&mut self.delta, self.spec, &self.mask)
    }

    /// `clip(V + delta ⊙ mask, 0, 1)`. The input is untouched; output
    /// pixels outside the mask are bit-identical to the input.
    pub fn apply(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        check_image_shape("apply", image.shape(), &self.mask)?;
        let src = image.data();
        let dst = self.delta.data();
        let mut out = Vec::with_capacity(src.len());
        for (i, (v, d)) in src.iter().zip(dst).enumerate() {
            if self.mask.bits[i / 3] == 0 {
                out.push(*v);
            } else {
                let sum = *v + *d;
                out.push(if sum < S::zero() {
                    S::zero()
                } else if sum > S::one() {
                    S::one()
                } else {
                    sum
                });
            }
        }
        Tensor::new(vec![self.mask.h, self.mask.w, 3], out)
    }

    /// Writes the artifact: a one-line ASCII header
    /// `ANYDOOR v1 <strategy> <budget> <H> <W>` followed by the delta in
    /// the binary tensor format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let budget = match self.spec {
            PerturbationSpec::Pixel { epsilon } => format!("{epsilon}"),
            PerturbationSpec::Corner { patch_width } => format!("{patch_width}"),
            PerturbationSpec::Border { border_width } => format!("{border_width}"),
        };
        writeln!(
            w,
            "ANYDOOR v1 {} {} {} {}",
            self.spec.strategy_name(),
            budget,
            self.mask.h,
            self.mask.w
        )?;
        write_tensor(&mut w, &self.delta)?;
        w.flush()?;
        Ok(())
    }

    /// Reads an artifact written by [`save`](Self::save), re-validating
    /// every feasibility invariant.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let bad = |detail: String| Error::Malformed {
            what: "perturbation artifact",
            detail,
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "ANYDOOR" || fields[1] != "v1" {
            return Err(bad(format!("header {header:?}, expected ANYDOOR v1 with 4 fields")));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|e| bad(format!("{what} {s:?}: {e}")))
        };
        let spec = match fields[2] {
            "pixel" => PerturbationSpec::Pixel {
                epsilon: fields[3]
                    .parse::<f64>()
                    .map_err(|e| bad(format!("epsilon {:?}: {e}", fields[3])))?,
            },
            "corner" => PerturbationSpec::Corner {
                patch_width: parse_usize(fields[3], "patch width")?,
            },
            "border" => PerturbationSpec::Border {
                border_width: parse_usize(fields[3], "border width")?,
            },
            other => return Err(bad(format!("unknown strategy {other:?}"))),
        };
        let h = parse_usize(fields[4], "height")?;
        let w = parse_usize(fields[5], "width")?;
        let delta: Tensor<S> = read_tensor(&mut r)?;
        if delta.shape() != [h, w, 3] {
            return Err(bad(format!(
                "header says {h}×{w} but payload has shape {:?}",
                delta.shape()
            )));
        }
        Self::from_delta(delta, spec)
    }
}

pub(crate) fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w, 3] => Ok((*h, *w)),
        other => Err(Error::shape(op, format!("expected H×W×3 image, got {other:?}"))),
    }
}

fn check_image_shape(op: &'static str, shape: &[usize], mask: &Mask) -> Result<()> {
    let (h, w) = image_dims(op, shape)?;
    if (h, w) != (mask.h, mask.w) {
        return Err(Error::shape(
            op,
            format!("image is {h}×{w} but the mask is {}×{}", mask.h, mask.w),
        ));
    }
    Ok(())
}
