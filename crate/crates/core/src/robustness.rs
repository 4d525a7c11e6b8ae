//! Persistence of a perturbation under image corruption and scene motion.
//!
//! Two stress tests live here. The corruption sweep re-runs the held-out
//! evaluation after post-capture processing — central crop, down/up
//! rescale, or additive Gaussian noise — applied strictly *after* the
//! perturbation, so the stored delta is never resampled. The frame
//! sequence renders one scene whose shapes drift a fixed step per frame,
//! bouncing off the interior content region, and asks whether the same
//! delta keeps firing as the scene moves.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{insert_trigger, ReferenceCache, TriggerTargetPair, REFERENCE_DECODE_CAP};
use crate::error::{Error, Result};
use crate::eval::{ensure_disjoint, score_prepared, EvalReport};
use crate::metrics::{contains_target, exact_match};
use crate::model::dataset::{
    derive_answer, render_scene, sample_question, sample_scene, Scene, VqaSample, FRAME, PITCH, SHAPE,
};
use crate::model::ToyMllm;
use crate::perturb::{image_dims, UniversalPerturbation};
use crate::rng::{normal_f64, stream_rng, streams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How far every shape moves per frame, in pixels per axis.
pub const DRIFT_STEP: f64 = 2.0;

// ── corruptions ──────────────────────────────────────────────────────────

/// One post-capture image corruption.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorruptionSpec {
    /// Central crop to `fraction` of each side, then bilinear resize back
    /// to the original size. `fraction = 1.0` is the identity.
    CropResize { fraction: f64 },
    /// Bilinear downscale to `⌈scale·H⌉ × ⌈scale·W⌉`, then back up.
    /// `scale = 1.0` is the identity.
    Rescale { scale: f64 },
    /// Per-entry additive Gaussian noise with standard deviation
    /// `sigma/255` (sigma is in 0–255 pixel units), clipped to `[0, 1]`.
    /// `sigma = 0` is the bit-exact identity.
    GaussianNoise { sigma: f64 },
}

impl CorruptionSpec {
    pub fn kind_name(self) -> &'static str {
        match self {
            CorruptionSpec::CropResize { .. } => "crop_resize",
            CorruptionSpec::Rescale { .. } => "rescale",
            CorruptionSpec::GaussianNoise { .. } => "gaussian_noise",
        }
    }

    /// The single numeric parameter of this corruption.
    pub fn param(self) -> f64 {
        match self {
            CorruptionSpec::CropResize { fraction } => fraction,
            CorruptionSpec::Rescale { scale } => scale,
            CorruptionSpec::GaussianNoise { sigma } => sigma,
        }
    }

    pub fn validate(self) -> Result<()> {
        let ok = match self {
            CorruptionSpec::CropResize { fraction } => fraction > 0.0 && fraction <= 1.0,
            CorruptionSpec::Rescale { scale } => scale > 0.0 && scale <= 1.0,
            CorruptionSpec::GaussianNoise { sigma } => sigma.is_finite() && sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidBudget(format!(
                "{} parameter {} out of range",
                self.kind_name(),
                self.param()
            )))
        }
    }
}

/// Bilinear resample of a window of `src` to `out_h × out_w`, with
/// half-pixel-center alignment. Interpolation runs in `f64` and uses the
/// `a + (b−a)·t` form, which returns `a` bit-exactly when `t == 0`; a
/// same-size full-window call is therefore the identity, and constant
/// images stay constant to the last bit.
fn window_resize<S: Scalar>(
    src: &Tensor<S>,
    y0: usize,
    x0: usize,
    win_h: usize,
    win_w: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor<S> {
    let w = src.shape()[1];
    let data = src.data();
    let sample = |y: usize, x: usize, c: usize| data[((y0 + y) * w + (x0 + x)) * 3 + c].as_f64();
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    Tensor::from_fn(vec![out_h, out_w, 3], |i| {
        let c = i % 3;
        let x = (i / 3) % out_w;
        let y = i / 3 / out_w;
        let sy = ((y as f64 + 0.5) * win_h as f64 / out_h as f64 - 0.5).clamp(0.0, (win_h - 1) as f64);
        let sx = ((x as f64 + 0.5) * win_w as f64 / out_w as f64 - 0.5).clamp(0.0, (win_w - 1) as f64);
        let (yi, xi) = (sy.floor() as usize, sx.floor() as usize);
        let (ty, tx) = (sy - yi as f64, sx - xi as f64);
        let yj = (yi + 1).min(win_h - 1);
        let xj = (xi + 1).min(win_w - 1);
        let top = lerp(sample(yi, xi, c), sample(yi, xj, c), tx);
        let bottom = lerp(sample(yj, xi, c), sample(yj, xj, c), tx);
        S::of_f64(lerp(top, bottom, ty))
    })
}

/// Bilinear resize of a whole `H×W×3` image (half-pixel centers).
pub fn bilinear_resize<S: Scalar>(image: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (h, w) = image_dims("bilinear_resize", image.shape())?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "bilinear_resize",
            format!("output {out_h}×{out_w} must be positive"),
        ));
    }
    Ok(window_resize(image, 0, 0, h, w, out_h, out_w))
}

/// Applies one corruption to an already-perturbed image. Only Gaussian
/// noise draws from `rng` (one draw per entry, row-major); the resampling
/// corruptions consume nothing, so stream positions are easy to audit.
pub fn corrupt<S: Scalar, R: Rng + ?Sized>(
    image: &Tensor<S>,
    spec: CorruptionSpec,
    rng: &mut R,
) -> Result<Tensor<S>> {
    spec.validate()?;
    let (h, w) = image_dims("corrupt", image.shape())?;
    match spec {
        CorruptionSpec::CropResize { fraction } => {
            let crop_h = ((fraction * h as f64).round() as usize).clamp(1, h);
            let crop_w = ((fraction * w as f64).round() as usize).clamp(1, w);
            let y0 = (h - crop_h) / 2;
            let x0 = (w - crop_w) / 2;
            Ok(window_resize(image, y0, x0, crop_h, crop_w, h, w))
        }
        CorruptionSpec::Rescale { scale } => {
            let down_h = (scale * h as f64).ceil() as usize;
            let down_w = (scale * w as f64).ceil() as usize;
            let down = window_resize(image, 0, 0, h, w, down_h, down_w);
            Ok(window_resize(&down, 0, 0, down_h, down_w, h, w))
        }
        CorruptionSpec::GaussianNoise { sigma } => {
            let mut out = image.clone();
            for v in out.data_mut() {
                let noisy = v.as_f64() + normal_f64(rng, sigma / 255.0);
                *v = S::of_f64(noisy.clamp(0.0, 1.0));
            }
            Ok(out)
        }
    }
}

/// One row of a corruption sweep: which corruption ran and what the
/// evaluation said. The first row of a sweep is always the uncorrupted
/// baseline (`kind == "baseline"`, no parameter).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionOutcome {
    pub kind: String,
    pub param: Option<f64>,
    pub report: EvalReport,
}

/// Runs the held-out evaluation once per corruption, plus the uncorrupted
/// baseline first. Corruption happens strictly after the perturbation is
/// applied. Every spec re-reads the same trigger-placement stream and
/// owns a corruption stream named by its position, so any difference
/// between two reports is attributable to the corruption alone. Report
/// fingerprints extend `fingerprint` with the corruption kind.
#[allow(clippy::too_many_arguments)]
pub fn eval_under_corruption<S: Scalar>(
    model: &ToyMllm<S>,
    pert: &UniversalPerturbation<S>,
    ensemble: &[VqaSample<S>],
    eval_set: &[VqaSample<S>],
    pair: &TriggerTargetPair,
    refs_eval: &ReferenceCache,
    specs: &[CorruptionSpec],
    fingerprint: &str,
    seed: u64,
) -> Result<Vec<CorruptionOutcome>> {
    for spec in specs {
        spec.validate()?;
    }
    ensure_disjoint(ensemble, eval_set)?;
    let perturbed: Vec<Tensor<S>> = eval_set
        .par_iter()
        .map(|s| pert.apply(&s.image))
        .collect::<Result<_>>()?;

    let mut outcomes = Vec::with_capacity(specs.len() + 1);
    let mut trigger_rng = stream_rng(seed, streams::TRIGGER_PLACEMENT);
    let baseline = score_prepared(
        model,
        &perturbed,
        eval_set,
        pair,
        refs_eval,
        &format!("{fingerprint}/baseline"),
        &mut trigger_rng,
    )?;
    outcomes.push(CorruptionOutcome {
        kind: "baseline".into(),
        param: None,
        report: baseline,
    });

    for (i, spec) in specs.iter().enumerate() {
        let mut noise_rng = stream_rng(seed, &format!("{}/{i}", streams::CORRUPTION));
        let corrupted: Vec<Tensor<S>> = perturbed
            .iter()
            .map(|img| corrupt(img, *spec, &mut noise_rng))
            .collect::<Result<_>>()?;
        let mut trigger_rng = stream_rng(seed, streams::TRIGGER_PLACEMENT);
        let report = score_prepared(
            model,
            &corrupted,
            eval_set,
            pair,
            refs_eval,
            &format!("{fingerprint}/{}={}", spec.kind_name(), spec.param()),
            &mut trigger_rng,
        )?;
        outcomes.push(CorruptionOutcome {
            kind: spec.kind_name().to_string(),
            param: Some(spec.param()),
            report,
        });
    }
    Ok(outcomes)
}

/// Sweep results as CSV, one row per outcome in sweep order; the
/// baseline's parameter cell is empty.
pub fn corruption_csv(outcomes: &[CorruptionOutcome]) -> String {
    let mut out = String::from("corruption,param,exact_match,contain,bleu4,rouge_l\n");
    for o in outcomes {
        let param = o.param.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            o.kind,
            param,
            o.report.with_trigger.exact_match,
            o.report.with_trigger.contain,
            o.report.without_trigger.bleu4,
            o.report.without_trigger.rouge_l,
        ));
    }
    out
}

/// Writes [`corruption_csv`] to `path`.
pub fn write_corruption_csv(outcomes: &[CorruptionOutcome], path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(corruption_csv(outcomes).as_bytes())?;
    Ok(())
}

// ── frame sequences ──────────────────────────────────────────────────────

/// One rendered frame of a drifting scene, with the question and the
/// scene-derived answer valid for that frame.
#[derive(Clone, Debug)]
pub struct Frame<S> {
    pub index: usize,
    pub image: Tensor<S>,
    pub question: Vec<u8>,
    pub answer: Vec<u8>,
    pub scene: Scene,
}

/// A short clip: one scene whose shapes drift [`DRIFT_STEP`] px per frame
/// along fixed diagonal velocities, reflecting at the borders of the
/// interior content region so the image frame stays content-free in every
/// frame (matching the static generator's placement rule).
#[derive(Clone, Debug)]
pub struct FrameSequence<S> {
    pub hw: usize,
    pub frames: Vec<Frame<S>>,
}

/// Reflects `pos` into `[lo, hi]`, flipping `vel` on each bounce.
fn bounce(pos: f64, lo: f64, hi: f64, vel: &mut f64) -> f64 {
    if hi <= lo {
        *vel = 0.0;
        return lo;
    }
    let mut p = pos;
    loop {
        if p < lo {
            p = 2.0 * lo - p;
            *vel = -*vel;
        } else if p > hi {
            p = 2.0 * hi - p;
            *vel = -*vel;
        } else {
            return p;
        }
    }
}

/// Builds a drifting-scene clip. Frame 0 is bit-identical to sample 0 of
/// the static generator for the same seed (same scene stream, same
/// question); later frames move every shape by its per-axis velocity of
/// ±[`DRIFT_STEP`] px drawn once from the frames stream. The question is
/// fixed across the clip and its answer is re-derived from each frame's
/// scene (the templates are position-free, so it never actually changes).
pub fn gen_frame_sequence<S: Scalar>(seed: u64, n_frames: usize, hw: usize) -> Result<FrameSequence<S>> {
    if n_frames == 0 {
        return Err(Error::Empty("frame sequence"));
    }
    if hw % FRAME != 0 || hw < 2 * FRAME + PITCH {
        return Err(Error::shape(
            "gen_frame_sequence",
            format!(
                "canvas {hw} must be a multiple of {FRAME} and at least {}",
                2 * FRAME + PITCH
            ),
        ));
    }
    let mut data_rng = stream_rng(seed, "data/0");
    let mut scene = sample_scene(&mut data_rng, hw);
    let (question, _) = sample_question(&mut data_rng, &scene);

    let mut drift_rng = stream_rng(seed, streams::FRAMES);
    let mut velocities: Vec<(f64, f64)> = scene
        .shapes
        .iter()
        .map(|_| {
            let vy = if drift_rng.random_range(0..2u32) == 0 { -DRIFT_STEP } else { DRIFT_STEP };
            let vx = if drift_rng.random_range(0..2u32) == 0 { -DRIFT_STEP } else { DRIFT_STEP };
            (vy, vx)
        })
        .collect();

    let lo = FRAME as f64;
    let hi = (hw - FRAME - SHAPE) as f64;
    let mut frames = Vec::with_capacity(n_frames);
    for index in 0..n_frames {
        if index > 0 {
            for (shape, v) in scene.shapes.iter_mut().zip(velocities.iter_mut()) {
                shape.y = bounce(shape.y + v.0, lo, hi, &mut v.0);
                shape.x = bounce(shape.x + v.1, lo, hi, &mut v.1);
            }
        }
        let answer = derive_answer(&scene, question.as_bytes())
            .ok_or_else(|| Error::malformed("frame question", "not derivable from the scene".to_string()))?;
        frames.push(Frame {
            index,
            image: render_scene(&scene, hw),
            question: question.clone().into_bytes(),
            answer: answer.into_bytes(),
            scene: scene.clone(),
        });
    }
    Ok(FrameSequence { hw, frames })
}

/// Per-frame verdicts: did the triggered decode hit the target, and what
/// did the untriggered decode say.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameOutcome {
    pub frame: usize,
    pub exact_match: bool,
    pub contain: bool,
    pub benign_decode: String,
}

/// Applies the same perturbation to every frame and scores each one: the
/// triggered question against the target, and the untriggered decode
/// recorded verbatim. `rng` feeds trigger insertion only.
pub fn eval_frames<S: Scalar, R: Rng + ?Sized>(
    model: &ToyMllm<S>,
    pert: &UniversalPerturbation<S>,
    seq: &FrameSequence<S>,
    pair: &TriggerTargetPair,
    rng: &mut R,
) -> Result<Vec<FrameOutcome>> {
    pair.validate()?;
    if seq.frames.is_empty() {
        return Err(Error::Empty("frame sequence"));
    }
    let triggered: Vec<Vec<u8>> = seq
        .frames
        .iter()
        .map(|f| insert_trigger(&f.question, &pair.trigger, rng))
        .collect();
    let target = pair.target.as_bytes();
    seq.frames
        .par_iter()
        .zip(triggered.par_iter())
        .map(|(frame, with_trigger)| {
            let adv = pert.apply(&frame.image)?;
            let triggered_out = model.greedy_decode(&adv, with_trigger, REFERENCE_DECODE_CAP)?;
            let benign_out = model.greedy_decode(&adv, &frame.question, REFERENCE_DECODE_CAP)?;
            Ok(FrameOutcome {
                frame: frame.index,
                exact_match: exact_match(&triggered_out, target),
                contain: contains_target(&triggered_out, target),
                benign_decode: String::from_utf8_lossy(&benign_out).into_owned(),
            })
        })
        .collect()
}

/// Fraction of frames whose triggered decode exactly matched the target.
pub fn frame_exact_match_rate(outcomes: &[FrameOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.exact_match).count() as f64 / outcomes.len() as f64
}

/// Outcomes as JSONL, one frame per line in clip order.
pub fn frames_jsonl(outcomes: &[FrameOutcome]) -> Result<String> {
    let mut out = String::new();
    for o in outcomes {
        let line =
            serde_json::to_string(o).map_err(|e| Error::malformed("frame outcome", e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{cache_references, Placement, TriggerSpec};
    use crate::model::dataset::gen_shapes_dataset;
    use crate::model::ModelConfig;
    use crate::perturb::PerturbationSpec;

    fn tiny_model() -> ToyMllm<f32> {
        ToyMllm::new(
            ModelConfig {
                image_hw: 16,
                dim: 16,
                blocks: 1,
                heads: 2,
                ffn: 32,
                text_ctx: 48,
            },
            4,
        )
        .unwrap()
    }

    fn tiny_samples(ids: std::ops::Range<u64>) -> Vec<VqaSample<f32>> {
        ids.map(|i| VqaSample {
            id: i,
            image: Tensor::from_fn(vec![16, 16, 3], |j| ((i as usize * 29 + j * 11) % 83) as f32 / 82.0),
            question: format!("probe {i}?").into_bytes(),
            answer: b"yes".to_vec(),
            scene: Scene { shapes: vec![] },
        })
        .collect()
    }

    fn demo_pair() -> TriggerTargetPair {
        TriggerTargetPair {
            trigger: TriggerSpec::new("SUDO", Placement::Prefix),
            target: "i will comply".into(),
        }
    }

    fn zero_pert() -> UniversalPerturbation<f32> {
        UniversalPerturbation::zeros(PerturbationSpec::Border { border_width: 2 }, 16, 16).unwrap()
    }

    fn ramp_image(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![h, w, 3], |i| ((i * 7) % 101) as f32 / 100.0)
    }

    // ── corruption transforms ────────────────────────────────────────────

    #[test]
    fn full_crop_is_the_bit_exact_identity() {
        let img = ramp_image(16, 16);
        let mut rng = stream_rng(0, streams::CORRUPTION);
        let out = corrupt(&img, CorruptionSpec::CropResize { fraction: 1.0 }, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn unit_rescale_is_the_bit_exact_identity() {
        let img = ramp_image(16, 16);
        let mut rng = stream_rng(0, streams::CORRUPTION);
        let out = corrupt(&img, CorruptionSpec::Rescale { scale: 1.0 }, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn zero_sigma_noise_is_the_bit_exact_identity() {
        let img = ramp_image(16, 16);
        let mut rng = stream_rng(0, streams::CORRUPTION);
        let out = corrupt(&img, CorruptionSpec::GaussianNoise { sigma: 0.0 }, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn rescaling_a_constant_image_returns_the_same_constant() {
        let img = Tensor::<f32>::full(vec![16, 16, 3], 0.37);
        let mut rng = stream_rng(0, streams::CORRUPTION);
        let out = corrupt(&img, CorruptionSpec::Rescale { scale: 0.5 }, &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn downscale_by_two_averages_each_pixel_block() {
        // With half-pixel centers, a 4×4 → 2×2 resize lands every source
        // coordinate exactly between two pixels, so each output is the
        // mean of a 2×2 block.
        let img = Tensor::<f32>::from_fn(vec![4, 4, 3], |i| (i / 3) as f32);
        let out = bilinear_resize(&img, 2, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut want = 0.0f32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        want += ((2 * oy + dy) * 4 + (2 * ox + dx)) as f32;
                    }
                }
                want /= 4.0;
                let got = out.data()[(oy * 2 + ox) * 3];
                assert!((got - want).abs() < 1e-5, "block ({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn upscale_interpolates_the_hand_computed_ramp() {
        // One column, values 0 and 1 along y. Resizing 2→4 rows samples
        // source coordinates −0.25, 0.25, 0.75, 1.25 → clamped weights
        // 0, 0.25, 0.75, 1.
        let img = Tensor::<f32>::from_fn(vec![2, 1, 3], |i| (i / 3) as f32);
        let out = bilinear_resize(&img, 4, 1).unwrap();
        let got: Vec<f32> = (0..4).map(|r| out.data()[r * 3]).collect();
        let want = [0.0, 0.25, 0.75, 1.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn gaussian_noise_moves_pixels_by_roughly_sigma_and_stays_in_range() {
        let img = Tensor::<f32>::full(vec![16, 16, 3], 0.5);
        let mut rng = stream_rng(7, streams::CORRUPTION);
        let out = corrupt(&img, CorruptionSpec::GaussianNoise { sigma: 8.0 }, &mut rng).unwrap();
        let mean_abs: f32 = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / out.numel() as f32;
        // E|N(0, (8/255)²)| = (8/255)·√(2/π) ≈ 0.025.
        assert!(mean_abs > 0.01 && mean_abs < 0.05, "mean |noise| {mean_abs}");
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn corruption_parameters_are_range_checked() {
        assert!(CorruptionSpec::CropResize { fraction: 0.0 }.validate().is_err());
        assert!(CorruptionSpec::CropResize { fraction: 1.1 }.validate().is_err());
        assert!(CorruptionSpec::Rescale { scale: 0.0 }.validate().is_err());
        assert!(CorruptionSpec::GaussianNoise { sigma: -1.0 }.validate().is_err());
        assert!(CorruptionSpec::GaussianNoise { sigma: f64::NAN }.validate().is_err());
        assert!(CorruptionSpec::GaussianNoise { sigma: 0.0 }.validate().is_ok());
    }

    #[test]
    fn corruption_spec_serde_uses_a_kind_tag() {
        let spec = CorruptionSpec::CropResize { fraction: 0.875 };
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"kind":"crop_resize","fraction":0.875}"#);
        let back: CorruptionSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<CorruptionSpec>(r#"{"kind":"rescale","scale":0.5,"x":1}"#).is_err());
    }

    // ── corruption sweep ─────────────────────────────────────────────────

    #[test]
    fn sweep_starts_with_a_baseline_and_identity_specs_match_its_scores() {
        let model = tiny_model();
        let eval_set = tiny_samples(50..56);
        let refs = cache_references(&model, &eval_set).unwrap();
        let outcomes = eval_under_corruption(
            &model,
            &zero_pert(),
            &[],
            &eval_set,
            &demo_pair(),
            &refs,
            &[
                CorruptionSpec::CropResize { fraction: 1.0 },
                CorruptionSpec::Rescale { scale: 0.5 },
            ],
            "fp",
            11,
        )
        .unwrap();
        assert_eq!(outcomes.len(), 3);
        assert_eq!(outcomes[0].kind, "baseline");
        assert_eq!(outcomes[0].param, None);
        assert_eq!(outcomes[1].kind, "crop_resize");
        assert_eq!(outcomes[1].param, Some(1.0));
        // The identity corruption reproduces the baseline scores exactly;
        // only the fingerprint differs.
        assert_eq!(outcomes[1].report.with_trigger, outcomes[0].report.with_trigger);
        assert_eq!(outcomes[1].report.without_trigger, outcomes[0].report.without_trigger);
        assert_ne!(outcomes[1].report.fingerprint, outcomes[0].report.fingerprint);
        assert!(outcomes[0].report.fingerprint.contains("baseline"));
        assert!(outcomes[1].report.fingerprint.contains("crop_resize"));
    }

    #[test]
    fn sweep_rejects_overlapping_sample_sets() {
        let model = tiny_model();
        let eval_set = tiny_samples(0..4);
        let refs = cache_references(&model, &eval_set).unwrap();
        let err = eval_under_corruption(
            &model,
            &zero_pert(),
            &eval_set[..2],
            &eval_set,
            &demo_pair(),
            &refs,
            &[],
            "fp",
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OverlappingSplits { .. }), "{err}");
    }

    #[test]
    fn sweep_csv_has_one_row_per_outcome_and_parses_back() {
        let model = tiny_model();
        let eval_set = tiny_samples(20..24);
        let refs = cache_references(&model, &eval_set).unwrap();
        let outcomes = eval_under_corruption(
            &model,
            &zero_pert(),
            &[],
            &eval_set,
            &demo_pair(),
            &refs,
            &[CorruptionSpec::GaussianNoise { sigma: 8.0 }],
            "fp",
            5,
        )
        .unwrap();
        let csv = corruption_csv(&outcomes);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "corruption,param,exact_match,contain,bleu4,rouge_l");
        assert_eq!(lines.len(), 3);
        let base: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(base[0], "baseline");
        assert_eq!(base[1], "");
        assert_eq!(base[2].parse::<f64>().unwrap(), outcomes[0].report.with_trigger.exact_match);
        let noise: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(noise[0], "gaussian_noise");
        assert_eq!(noise[1].parse::<f64>().unwrap(), 8.0);
        assert_eq!(noise[5].parse::<f64>().unwrap(), outcomes[1].report.without_trigger.rouge_l);
    }

    // ── frame sequences ──────────────────────────────────────────────────

    #[test]
    fn frame_zero_matches_the_static_generator() {
        let seq = gen_frame_sequence::<f32>(77, 3, 64).unwrap();
        let stills = gen_shapes_dataset::<f32>(1, 77, 64).unwrap();
        assert_eq!(seq.frames[0].image, stills[0].image);
        assert_eq!(seq.frames[0].question, stills[0].question);
        assert_eq!(seq.frames[0].answer, stills[0].answer);
        assert_eq!(seq.frames[0].scene, stills[0].scene);
    }

    #[test]
    fn shapes_drift_but_scene_identity_and_answers_hold() {
        let seq = gen_frame_sequence::<f32>(13, 30, 64).unwrap();
        assert_eq!(seq.frames.len(), 30);
        let first = &seq.frames[0];
        let mut moved = false;
        for frame in &seq.frames {
            assert_eq!(frame.scene.shapes.len(), first.scene.shapes.len());
            for (a, b) in frame.scene.shapes.iter().zip(&first.scene.shapes) {
                assert_eq!(a.kind, b.kind);
                assert_eq!(a.color, b.color);
                moved |= a.y != b.y || a.x != b.x;
            }
            assert_eq!(frame.question, first.question);
            assert_eq!(
                derive_answer(&frame.scene, &frame.question).unwrap().into_bytes(),
                frame.answer
            );
        }
        assert!(moved, "no shape ever moved");
    }

    #[test]
    fn drifting_shapes_never_touch_the_border_band() {
        let seq = gen_frame_sequence::<f32>(21, 40, 64).unwrap();
        for frame in &seq.frames {
            for shape in &frame.scene.shapes {
                assert!(shape.y >= FRAME as f64 && shape.y <= (64 - FRAME - SHAPE) as f64);
                assert!(shape.x >= FRAME as f64 && shape.x <= (64 - FRAME - SHAPE) as f64);
            }
            for y in 0..64usize {
                for x in 0..64usize {
                    let border = y < FRAME || x < FRAME || y >= 64 - FRAME || x >= 64 - FRAME;
                    if border {
                        let base = (y * 64 + x) * 3;
                        assert_eq!(frame.image.data()[base], 0.0, "content at ({y},{x})");
                    }
                }
            }
        }
    }

    #[test]
    fn drift_reflects_and_revisits_earlier_positions() {
        // With ±2 px/frame inside a 32-px span the motion is periodic;
        // some later frame must land exactly on the frame-1 positions.
        let seq = gen_frame_sequence::<f32>(13, 40, 64).unwrap();
        let pos = |f: &Frame<f32>| -> Vec<(f64, f64)> { f.scene.shapes.iter().map(|s| (s.y, s.x)).collect() };
        let target = pos(&seq.frames[1]);
        assert!(
            seq.frames[2..].iter().any(|f| pos(f) == target),
            "motion never revisited an earlier state"
        );
    }

    #[test]
    fn empty_or_undersized_clips_are_rejected() {
        assert!(matches!(
            gen_frame_sequence::<f32>(0, 0, 64).unwrap_err(),
            Error::Empty("frame sequence")
        ));
        assert!(gen_frame_sequence::<f32>(0, 3, 24).is_err());
    }

    #[test]
    fn frame_eval_scores_every_frame_and_is_deterministic() {
        let model = tiny_model();
        let seq = gen_frame_sequence::<f32>(3, 4, 64).unwrap();
        // The tiny model expects 16×16 images, so rebuild a toy clip at
        // that size by cropping the rendered frames' top-left corner.
        let small = FrameSequence {
            hw: 16,
            frames: seq
                .frames
                .iter()
                .map(|f| Frame {
                    index: f.index,
                    image: Tensor::from_fn(vec![16, 16, 3], |i| {
                        let c = i % 3;
                        let x = (i / 3) % 16;
                        let y = i / 3 / 16;
                        f.image.data()[(y * 64 + x) * 3 + c]
                    }),
                    question: f.question.clone(),
                    answer: f.answer.clone(),
                    scene: f.scene.clone(),
                })
                .collect(),
        };
        let run = || {
            let mut rng = stream_rng(5, streams::TRIGGER_PLACEMENT);
            eval_frames(&model, &zero_pert(), &small, &demo_pair(), &mut rng).unwrap()
        };
        let outcomes = run();
        assert_eq!(outcomes.len(), 4);
        for (k, o) in outcomes.iter().enumerate() {
            assert_eq!(o.frame, k);
            assert!(o.contain || !o.exact_match, "containment must cover equality");
        }
        assert_eq!(outcomes, run());
        let rate = frame_exact_match_rate(&outcomes);
        assert!((0.0..=1.0).contains(&rate));
        let jsonl = frames_jsonl(&outcomes).unwrap();
        assert_eq!(jsonl.lines().count(), 4);
        let back: FrameOutcome = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(back, outcomes[0]);
    }
}
