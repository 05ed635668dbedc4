//! Batch evaluation: attack gauntlets, strength and guidance sweeps, and
//! the inversion-steps ablation.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackKind, AttackSpec, AttackSuite};
use crate::codec::CodecParams;
use crate::detector::{match_count, ThresholdPolicy};
use crate::diffusion::{sample_batch, Condition, DiffusionBackend, GuidanceConfig};
use crate::ecc::RscCode;
use crate::error::{Error, Result};
use crate::message::BitMessage;
use crate::scalar::Scalar;
use crate::tensor::{Image, LatentTensor};
use crate::training::{embed_batch, WatermarkPipeline};

/// Images per generation or extraction call.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRun {
    pub n_images: usize,
    pub seed: u64,
    /// Attacks evaluated after the clean row.
    pub attacks: Vec<AttackSpec>,
    pub alpha: f64,
    pub policy: ThresholdPolicy,
    pub guidance: GuidanceConfig,
    /// When non-empty, image `i` is generated under `conditions[i % len]`
    /// instead of `guidance.condition`.
    pub conditions: Vec<Condition>,
    pub inversion_steps: usize,
    /// Unwatermarked generations used to measure the false-positive rate.
    pub n_controls: usize,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            n_images: 200,
            seed: 1234,
            attacks: AttackKind::BUILTIN
                .iter()
                .map(|k| AttackSpec::table(k.clone(), 0).expect("built-in kinds have table strengths"))
                .collect(),
            alpha: 0.01,
            policy: ThresholdPolicy::Exact,
            guidance: GuidanceConfig::default(),
            conditions: Vec::new(),
            inversion_steps: 5,
            n_controls: 0,
        }
    }
}

impl EvalRun {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Config("an evaluation needs at least one image".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Aggregates for one attack setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// `none` for the clean row, otherwise `kind:strength`.
    pub label: String,
    pub attack: Option<AttackSpec>,
    pub n: usize,
    pub bit_accuracy: f64,
    /// Standard error of the per-image bit accuracy.
    pub bit_accuracy_stderr: f64,
    pub detection_rate: f64,
    /// Fraction of images whose ECC-corrected payload is exact; equals
    /// `raw_exact_rate` when no code is configured.
    pub payload_recovery_rate: f64,
    /// Fraction of images whose extracted watermark bits are exact.
    pub raw_exact_rate: f64,
    /// Set when the row could not be evaluated.
    pub skipped: Option<String>,
}

impl EvalRow {
    fn skipped(label: String, attack: Option<AttackSpec>, reason: String) -> Self {
        Self {
            label,
            attack,
            n: 0,
            bit_accuracy: 0.0,
            bit_accuracy_stderr: 0.0,
            detection_rate: 0.0,
            payload_recovery_rate: 0.0,
            raw_exact_rate: 0.0,
            skipped: Some(reason),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub n: usize,
    pub detection_rate: f64,
    pub bit_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub k: usize,
    pub threshold: usize,
    pub alpha: f64,
    pub rows: Vec<EvalRow>,
    pub control: Option<ControlRow>,
}

impl EvalResult {
    pub fn row(&self, label: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aligned text table with `bit/detect` cells.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "k={} threshold={} alpha={}",
            self.k, self.threshold, self.alpha
        );
        let _ = writeln!(out, "{:<22} {:>6} {:>13} {:>8} {:>8}", "attack", "n", "bit/detect", "payload", "exact");
        for r in &self.rows {
            match &r.skipped {
                Some(reason) => {
                    let _ = writeln!(out, "{:<22} skipped: {reason}", r.label);
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{:<22} {:>6} {:>13} {:>8.3} {:>8.3}",
                        r.label,
                        r.n,
                        format!("{:.3}/{:.3}", r.bit_accuracy, r.detection_rate),
                        r.payload_recovery_rate,
                        r.raw_exact_rate
                    );
                }
            }
        }
        if let Some(c) = &self.control {
            let _ = writeln!(
                out,
                "{:<22} {:>6} {:>13}",
                "control (unmarked)",
                c.n,
                format!("{:.3}/{:.3}", c.bit_accuracy, c.detection_rate)
            );
        }
        out
    }
}

/// Watermarked images with their payloads and watermark bits.
struct Marked {
    images: Vec<Image>,
    payloads: Vec<BitMessage>,
    bits: Vec<BitMessage>,
}

fn payload_length<T: Scalar>(codec: &CodecParams<T>, ecc: Option<&RscCode>) -> usize {
    ecc.map_or(codec.k(), |c| c.config().payload_length)
}

fn generate_marked<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    run: &EvalRun,
    guidance: &GuidanceConfig,
    backend: &B,
    codec: &CodecParams<T>,
    ecc: Option<&RscCode>,
) -> Result<Marked> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let len = payload_length(codec, ecc);
    let payloads: Vec<BitMessage> = (0..run.n_images).map(|_| BitMessage::random(len, &mut rng)).collect();
    let seeds: Vec<u64> = (0..run.n_images as u64).map(|i| run.seed.wrapping_mul(1_000_003).wrapping_add(i)).collect();
    let conditions = if run.conditions.is_empty() {
        vec![guidance.condition]
    } else {
        run.conditions.clone()
    };
    let mut slots: Vec<Option<(Image, BitMessage)>> = vec![None; run.n_images];
    for (ci, &condition) in conditions.iter().enumerate() {
        let idx: Vec<usize> = (ci..run.n_images).step_by(conditions.len()).collect();
        let g = GuidanceConfig { condition, ..*guidance };
        for chunk in idx.chunks(CHUNK) {
            let p: Vec<BitMessage> = chunk.iter().map(|&i| payloads[i].clone()).collect();
            let s: Vec<u64> = chunk.iter().map(|&i| seeds[i]).collect();
            for (&i, out) in chunk.iter().zip(embed_batch(&p, &s, codec, backend, &g, ecc)?) {
                slots[i] = Some(out);
            }
        }
    }
    let (images, bits) = slots.into_iter().map(|s| s.expect("every index is assigned")).unzip();
    Ok(Marked { images, payloads, bits })
}

fn extract_all<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    pipeline: &WatermarkPipeline<'_, T, B>,
    images: &[Image],
) -> Result<Vec<BitMessage>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        out.extend(pipeline.extract_batch(chunk)?);
    }
    Ok(out)
}

fn score_row<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    label: String,
    attack: Option<AttackSpec>,
    marked: &Marked,
    pipeline: &WatermarkPipeline<'_, T, B>,
    suite: &AttackSuite,
    threshold: usize,
) -> Result<EvalRow> {
    let images: Vec<Image> = match &attack {
        None => marked.images.clone(),
        Some(spec) => {
            if !suite.supports(&spec.kind) {
                return Ok(EvalRow::skipped(
                    label,
                    attack.clone(),
                    format!("no adapter registered for `{}`", spec.kind),
                ));
            }
            marked
                .images
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let per_image = AttackSpec {
                        seed: spec.seed.wrapping_add(i as u64),
                        ..spec.clone()
                    };
                    suite.apply(img, &per_image)
                })
                .collect::<Result<_>>()?
        }
    };
    let extracted = extract_all(pipeline, &images)?;
    let n = extracted.len();
    let k = marked.bits.first().map_or(0, |b| b.len()).max(1);
    let mut accs = Vec::with_capacity(n);
    let (mut detected, mut recovered, mut exact) = (0usize, 0usize, 0usize);
    for ((got, bits), payload) in extracted.iter().zip(&marked.bits).zip(&marked.payloads) {
        let m = match_count(bits, got)?;
        accs.push(m as f64 / k as f64);
        detected += usize::from(m >= threshold);
        exact += usize::from(m == k);
        let traced = match pipeline.ecc.as_ref() {
            Some(code) => &code.decode(got)?.0 == payload,
            None => m == k,
        };
        recovered += usize::from(traced);
    }
    let nf = n as f64;
    let mean = accs.iter().sum::<f64>() / nf;
    let var = if n > 1 {
        accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (nf - 1.0)
    } else {
        0.0
    };
    Ok(EvalRow {
        label,
        attack,
        n,
        bit_accuracy: mean,
        bit_accuracy_stderr: (var / nf).sqrt(),
        detection_rate: detected as f64 / nf,
        payload_recovery_rate: recovered as f64 / nf,
        raw_exact_rate: exact as f64 / nf,
        skipped: None,
    })
}

fn control_row<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    run: &EvalRun,
    marked: &Marked,
    backend: &B,
    pipeline: &WatermarkPipeline<'_, T, B>,
    threshold: usize,
) -> Result<ControlRow> {
    let shape = backend.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0xc0de);
    let mut detected = 0usize;
    let mut acc = 0.0;
    let mut done = 0;
    while done < run.n_controls {
        let size = CHUNK.min(run.n_controls - done);
        let zs: Vec<LatentTensor<T>> = (0..size).map(|_| LatentTensor::randn(shape, &mut rng)).collect();
        let images = sample_batch(backend, &zs, &run.guidance)?;
        for (j, got) in pipeline.extract_batch(&images)?.iter().enumerate() {
            // compared against the watermark bits of the marked set, cycled
            let expected = &marked.bits[(done + j) % marked.bits.len()];
            let m = match_count(expected, got)?;
            detected += usize::from(m >= threshold);
            acc += m as f64 / expected.len() as f64;
        }
        done += size;
    }
    let n = run.n_controls.max(1) as f64;
    Ok(ControlRow {
        n: run.n_controls,
        detection_rate: detected as f64 / n,
        bit_accuracy: acc / n,
    })
}

fn label_for(spec: &AttackSpec) -> String {
    format!("{}:{}", spec.kind, spec.strength)
}

/// Embeds `n_images` random payloads, then for the clean path and each
/// attack extracts, detects and aggregates. Attacks without a registered
/// adapter become skipped rows.
pub fn run_gauntlet<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    run: &EvalRun,
    backend: &B,
    codec: &CodecParams<T>,
    ecc: Option<&RscCode>,
    suite: &AttackSuite,
) -> Result<EvalResult> {
    run.validate()?;
    let threshold = run.policy.threshold(codec.k(), run.alpha)?;
    let marked = generate_marked(run, &run.guidance, backend, codec, ecc)?;
    let pipeline = WatermarkPipeline::new(backend, codec, run.inversion_steps, ecc.cloned());
    let mut rows = vec![score_row("none".into(), None, &marked, &pipeline, suite, threshold)?];
    for spec in &run.attacks {
        rows.push(score_row(label_for(spec), Some(spec.clone()), &marked, &pipeline, suite, threshold)?);
    }
    let control = if run.n_controls > 0 {
        Some(control_row(run, &marked, backend, &pipeline, threshold)?)
    } else {
        None
    };
    Ok(EvalResult {
        k: codec.k(),
        threshold,
        alpha: run.alpha,
        rows,
        control,
    })
}

/// One curve of a sweep: the swept value and the row measured at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub row: EvalRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    /// What was varied, e.g. `gaussian_noise` or `guidance_scale`.
    pub parameter: String,
    pub points: Vec<SweepPoint>,
    /// For the inversion ablation: first step count from which every later
    /// detection rate is within the tolerance of the last one.
    pub stabilization: Option<f64>,
}

impl SweepCurve {
    /// Tab-separated `value bit_accuracy stderr detection_rate payload_recovery`.
    pub fn to_table(&self) -> String {
        let mut out = format!("# {}\nvalue\tbit_accuracy\tstderr\tdetection_rate\tpayload_recovery\n", self.parameter);
        for p in &self.points {
            let _ = writeln!(
                out,
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                p.value, p.row.bit_accuracy, p.row.bit_accuracy_stderr, p.row.detection_rate, p.row.payload_recovery_rate
            );
        }
        if let Some(s) = self.stabilization {
            let _ = writeln!(out, "# stabilizes at {s}");
        }
        out
    }

    /// Line chart of bit accuracy (solid) and detection rate (dashed)
    /// against the swept value, as a standalone SVG document.
    pub fn to_svg(&self) -> String {
        const W: f64 = 480.0;
        const H: f64 = 320.0;
        const PAD: f64 = 48.0;
        let values: Vec<f64> = self.points.iter().map(|p| p.value).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let x = |v: f64| PAD + (v - lo) / span * (W - 2.0 * PAD);
        let y = |r: f64| H - PAD - r.clamp(0.0, 1.0) * (H - 2.0 * PAD);
        let polyline = |f: &dyn Fn(&EvalRow) -> f64| {
            self.points
                .iter()
                .filter(|p| p.row.skipped.is_none())
                .map(|p| format!("{:.1},{:.1}", x(p.value), y(f(&p.row))))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n",
            b = H - PAD,
            r = W - PAD
        );
        for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let _ = writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{tick:.2}</text>",
                PAD - 6.0,
                y(tick) + 4.0
            );
        }
        for v in &values {
            let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v}</text>", x(*v), H - PAD + 16.0);
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            W / 2.0,
            H - 8.0,
            xml_escape(&self.parameter)
        );
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>",
            polyline(&|r| r.bit_accuracy)
        );
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\" stroke-dasharray=\"6 4\" points=\"{}\"/>",
            polyline(&|r| r.detection_rate)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"20\" fill=\"#1f77b4\">bit accuracy</text>\n<text x=\"{:.1}\" y=\"20\" fill=\"#d62728\">detection rate</text>",
            PAD,
            PAD + 100.0
        );
        svg.push_str("</svg>\n");
        svg
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bit and detection accuracy of one attack kind at several strengths on a
/// shared set of watermarked images.
pub fn strength_sweep<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    kind: &AttackKind,
    strengths: &[f64],
    run: &EvalRun,
    backend: &B,
    codec: &CodecParams<T>,
    ecc: Option<&RscCode>,
    suite: &AttackSuite,
) -> Result<SweepCurve> {
    run.validate()?;
    if strengths.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sweep strengths must be sorted ascending".into()));
    }
    let specs = strengths
        .iter()
        .map(|&s| AttackSpec::new(kind.clone(), s, run.seed))
        .collect::<Result<Vec<_>>>()?;
    let threshold = run.policy.threshold(codec.k(), run.alpha)?;
    let marked = generate_marked(run, &run.guidance, backend, codec, ecc)?;
    let pipeline = WatermarkPipeline::new(backend, codec, run.inversion_steps, ecc.cloned());
    let points = specs
        .into_iter()
        .map(|spec| {
            let value = spec.strength;
            score_row(label_for(&spec), Some(spec), &marked, &pipeline, suite, threshold).map(|row| SweepPoint { value, row })
        })
        .collect::<Result<_>>()?;
    Ok(SweepCurve {
        parameter: kind.to_string(),
        points,
        stabilization: None,
    })
}

/// Clean-path accuracy at several guidance scales; each scale generates its
/// own images from the same payloads and seeds.
pub fn guidance_sweep<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    scales: &[f64],
    run: &EvalRun,
    backend: &B,
    codec: &CodecParams<T>,
    ecc: Option<&RscCode>,
) -> Result<SweepCurve> {
    run.validate()?;
    let threshold = run.policy.threshold(codec.k(), run.alpha)?;
    let pipeline = WatermarkPipeline::new(backend, codec, run.inversion_steps, ecc.cloned());
    let suite = AttackSuite::new();
    let mut points = Vec::with_capacity(scales.len());
    for &w in scales {
        let guidance = GuidanceConfig { scale: w, ..run.guidance };
        let marked = generate_marked(run, &guidance, backend, codec, ecc)?;
        let row = score_row(format!("w={w}"), None, &marked, &pipeline, &suite, threshold)?;
        points.push(SweepPoint { value: w, row });
    }
    Ok(SweepCurve {
        parameter: "guidance_scale".into(),
        points,
        stabilization: None,
    })
}

/// Clean-path detection against the number of inversion steps. The
/// stabilization step is the first entry from which all later detection
/// rates stay within `tolerance` of the final one.
pub fn inversion_steps_ablation<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    steps_list: &[usize],
    tolerance: f64,
    run: &EvalRun,
    backend: &B,
    codec: &CodecParams<T>,
    ecc: Option<&RscCode>,
) -> Result<SweepCurve> {
    run.validate()?;
    if steps_list.is_empty() {
        return Err(Error::Config("the inversion ablation needs at least one step count".into()));
    }
    let threshold = run.policy.threshold(codec.k(), run.alpha)?;
    let marked = generate_marked(run, &run.guidance, backend, codec, ecc)?;
    let suite = AttackSuite::new();
    let mut points = Vec::with_capacity(steps_list.len());
    for &steps in steps_list {
        let pipeline = WatermarkPipeline::new(backend, codec, steps, ecc.cloned());
        let row = score_row(format!("steps={steps}"), None, &marked, &pipeline, &suite, threshold)?;
        points.push(SweepPoint {
            value: steps as f64,
            row,
        });
    }
    let stabilization = stabilization_point(&points, tolerance);
    Ok(SweepCurve {
        parameter: "inversion_steps".into(),
        points,
        stabilization,
    })
}

fn stabilization_point(points: &[SweepPoint], tolerance: f64) -> Option<f64> {
    let last = points.last()?.row.detection_rate;
    let first_stable = (0..points.len())
        .find(|&i| points[i..].iter().all(|p| (p.row.detection_rate - last).abs() <= tolerance))
        .expect("the last point is always stable");
    Some(points[first_stable].value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(value: f64, detection_rate: f64) -> SweepPoint {
        SweepPoint {
            value,
            row: EvalRow {
                detection_rate,
                ..EvalRow::skipped(String::new(), None, String::new())
            },
        }
    }

    #[test]
    fn stabilization_ignores_early_plateaus() {
        let pts = vec![point(1.0, 0.5), point(2.0, 0.97), point(3.0, 0.9), point(5.0, 0.99), point(10.0, 1.0)];
        assert_eq!(stabilization_point(&pts, 0.02), Some(5.0));
        assert_eq!(stabilization_point(&pts[..1], 0.02), Some(1.0));
        assert_eq!(stabilization_point(&[], 0.02), None);
    }

    #[test]
    fn zero_images_is_a_config_error() {
        let run = EvalRun {
            n_images: 0,
            ..Default::default()
        };
        assert!(matches!(run.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let curve = SweepCurve {
            parameter: "a<b".into(),
            points: vec![point(1.0, 0.5), point(2.0, 1.0)],
            stabilization: None,
        };
        let svg = curve.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }
}
