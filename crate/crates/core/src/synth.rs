//! Synthetic two-lab MALDI-like cohorts with a class-coupled baseline
//! confounder, plus the on-disk cohort format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{tic_normalize, ModelError, Spectrum};

/// Mass difference between consecutive isotopic peaks.
pub const ISOTOPE_SPACING_DA: f64 = 1.00335;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic cohort config: {0}")]
    Config(String),
    #[error("{file}: {detail}")]
    Format { file: String, detail: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Monoisotopic mass in Da.
    pub mz: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    pub name: String,
    /// Baseline height at the low end of the m/z range.
    pub baseline_amplitude: f64,
    /// e-folding length of the baseline in Da.
    pub baseline_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Patients per class. Every patient is measured in every lab.
    pub patients_per_class: usize,
    /// Inclusive range of spots per patient and lab.
    pub spots_per_patient: (usize, usize),
    pub n_bins: usize,
    pub mz_start: f64,
    pub mz_end: f64,
    pub class_names: Vec<String>,
    /// Biomarker peaks raised in each class, indexed by class.
    pub biomarkers: Vec<Vec<Peak>>,
    /// Biomarker amplitude in the other class or in a non-expressing spot,
    /// as a fraction.
    pub absent_fraction: f64,
    /// Probability that a spot expresses its class biomarkers.
    pub expression_rate: f64,
    pub background_peaks: Vec<Peak>,
    pub envelope_peaks: usize,
    pub envelope_decay: f64,
    /// Gaussian peak σ in Da.
    pub peak_width: f64,
    /// Log-scale σ of the per-patient expression level shared by the
    /// patient's own biomarkers.
    pub patient_sd: f64,
    /// Log-scale σ of per-spot, per-peak biomarker amplitude factors.
    pub spot_sd: f64,
    /// Log-scale σ of patient and spot factors on background peaks.
    pub background_sd: f64,
    pub labs: Vec<LabConfig>,
    /// In `[0, 1]`; scales the class-dependent baseline shift.
    pub confounder_strength: f64,
    /// Relative baseline shift between class and mean at strength 1.
    pub baseline_coupling: f64,
    /// Log-scale σ of per-spot baseline amplitude factors.
    pub baseline_jitter: f64,
    /// σ of the additive Gaussian noise, truncated at zero.
    pub noise_sd: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let (biomarkers, background_peaks) = default_peaks();
        Self {
            seed: 0,
            patients_per_class: 20,
            spots_per_patient: (20, 40),
            n_bins: 2000,
            mz_start: 800.0,
            mz_end: 2000.0,
            class_names: vec!["breast".into(), "ovary".into()],
            biomarkers,
            absent_fraction: 0.4,
            expression_rate: 0.8,
            background_peaks,
            envelope_peaks: 5,
            envelope_decay: 0.85,
            peak_width: 0.6,
            patient_sd: 0.7,
            spot_sd: 0.3,
            background_sd: 0.3,
            labs: vec![
                LabConfig {
                    name: "HB".into(),
                    baseline_amplitude: 2.1,
                    baseline_decay: 1e5,
                },
                LabConfig {
                    name: "TR".into(),
                    baseline_amplitude: 2.1,
                    baseline_decay: 1e5,
                },
            ],
            confounder_strength: 0.8,
            baseline_coupling: 0.38,
            baseline_jitter: 0.01,
            noise_sd: 2.0,
        }
    }
}

/// 54 peaks about 21.5 Da apart from 820 Da; four slots in every nine hold
/// biomarkers, alternating between the classes, the rest are background.
fn default_peaks() -> (Vec<Vec<Peak>>, Vec<Peak>) {
    let mut biomarkers = vec![Vec::new(), Vec::new()];
    let mut background = Vec::new();
    let mut marker = 0;
    for i in 0..54 {
        // off-grid masses so peaks do not all sit on bin centres
        let frac = (i as f64 * 0.618_034).fract();
        let mz = 820.0 + 21.5 * i as f64 + 0.5 * frac;
        if matches!(i % 9, 1 | 3 | 5 | 7) {
            biomarkers[marker % 2].push(Peak { mz, amplitude: 25.0 });
            marker += 1;
        } else {
            background.push(Peak {
                mz,
                amplitude: 150.0 + 200.0 * frac,
            });
        }
    }
    (biomarkers, background)
}

impl SynthConfig {
    pub fn mz_step(&self) -> f64 {
        (self.mz_end - self.mz_start) / self.n_bins as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_bins == 0 || !(self.mz_end > self.mz_start) {
            return bad("need n_bins > 0 and mz_end > mz_start".into());
        }
        if self.patients_per_class == 0 {
            return bad("patients_per_class must be positive".into());
        }
        let (lo, hi) = self.spots_per_patient;
        if lo == 0 || hi < lo {
            return bad(format!("spots_per_patient ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        if self.class_names.len() < 2 || self.biomarkers.len() != self.class_names.len() {
            return bad("need at least two classes and one biomarker list per class".into());
        }
        if self.labs.is_empty() {
            return bad("need at least one lab".into());
        }
        let names: BTreeSet<&str> = self.labs.iter().map(|l| l.name.as_str()).collect();
        if names.len() != self.labs.len() {
            return bad("lab names must be distinct".into());
        }
        if !(0.0..=1.0).contains(&self.confounder_strength) {
            return bad(format!("confounder_strength {} must lie in [0, 1]", self.confounder_strength));
        }
        if !(3..=5).contains(&self.envelope_peaks) {
            return bad(format!("envelope_peaks {} must be 3, 4 or 5", self.envelope_peaks));
        }
        for (name, v) in [
            ("absent_fraction", self.absent_fraction),
            ("envelope_decay", self.envelope_decay),
            ("peak_width", self.peak_width),
            ("patient_sd", self.patient_sd),
            ("spot_sd", self.spot_sd),
            ("background_sd", self.background_sd),
            ("baseline_coupling", self.baseline_coupling),
            ("baseline_jitter", self.baseline_jitter),
            ("noise_sd", self.noise_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        if !(0.0..=1.0).contains(&self.expression_rate) {
            return bad(format!("expression_rate {} must lie in [0, 1]", self.expression_rate));
        }
        if self.baseline_coupling >= 1.0 {
            return bad("baseline_coupling must be below 1".into());
        }
        for lab in &self.labs {
            if !(lab.baseline_amplitude >= 0.0 && lab.baseline_decay > 0.0) {
                return bad(format!("lab {}: baseline amplitude and decay must be positive", lab.name));
            }
        }
        let peaks = self.biomarkers.iter().flatten().chain(&self.background_peaks);
        for p in peaks {
            if !(p.mz >= self.mz_start && p.mz <= self.mz_end) || !(p.amplitude >= 0.0) {
                return bad(format!("peak at {} Da lies outside [{}, {}] or has negative amplitude", p.mz, self.mz_start, self.mz_end));
            }
        }
        Ok(())
    }

    /// Bins farther than four peak widths plus the envelope extent from any
    /// peak; only baseline and noise live there.
    pub fn peak_free_bins(&self) -> Vec<usize> {
        let step = self.mz_step();
        let span = (self.envelope_peaks - 1) as f64 * ISOTOPE_SPACING_DA;
        let margin = 4.0 * self.peak_width + step;
        let peaks: Vec<f64> = self
            .biomarkers
            .iter()
            .flatten()
            .chain(&self.background_peaks)
            .map(|p| p.mz)
            .collect();
        (0..self.n_bins)
            .filter(|&i| {
                let m = self.mz_start + i as f64 * step;
                peaks.iter().all(|&p| m < p - margin || m > p + span + margin)
            })
            .collect()
    }

    /// Bin nearest to `mz`.
    pub fn bin_of(&self, mz: f64) -> usize {
        (((mz - self.mz_start) / self.mz_step()).round().max(0.0) as usize).min(self.n_bins - 1)
    }
}

/// Isotopic peaks `(mass + k·1.00335, amplitude·decay^k)` for `k < count`.
pub fn isotopic_envelope(mass: f64, amplitude: f64, decay: f64, count: usize) -> Vec<(f64, f64)> {
    (0..count)
        .map(|k| (mass + k as f64 * ISOTOPE_SPACING_DA, amplitude * decay.powi(k as i32)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortSample {
    pub id: String,
    pub patient_id: String,
    pub lab_id: String,
    pub label: usize,
    pub spectrum: Spectrum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub class_names: Vec<String>,
    pub mz_start: f64,
    pub mz_step: f64,
    pub n: usize,
    pub samples: Vec<CohortSample>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Lab ids in order of first appearance.
    pub fn labs(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.lab_id) {
                out.push(s.lab_id.clone());
            }
        }
        out
    }

    /// Patient ids of one lab in order of first appearance.
    pub fn patients(&self, lab: &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for s in self.samples.iter().filter(|s| s.lab_id == lab) {
            if seen.insert(s.patient_id.as_str()) {
                out.push(s.patient_id.clone());
            }
        }
        out
    }

    pub fn spectrum(&self, i: usize) -> &[f64] {
        &self.samples[i].spectrum.intensities
    }

    /// Checks shared axis, labels in range, and one class per patient.
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| {
            Err(SynthError::Format {
                file: "cohort".into(),
                detail,
            })
        };
        let mut class_of: BTreeMap<&str, usize> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return bad(format!("sample id {} occurs twice", s.id));
            }
            if s.spectrum.len() != self.n || s.spectrum.mz_start != self.mz_start || s.spectrum.mz_step != self.mz_step {
                return bad(format!("sample {} does not share the cohort m/z axis", s.id));
            }
            if s.label >= self.classes() {
                return bad(format!("sample {} has label {} outside 0..{}", s.id, s.label, self.classes()));
            }
            if let Some(prev) = class_of.insert(&s.patient_id, s.label) {
                if prev != s.label {
                    return bad(format!("patient {} appears with labels {prev} and {}", s.patient_id, s.label));
                }
            }
        }
        Ok(())
    }
}

/// Random substream for one (patient, lab, spot) triple; lab and spot are
/// `u16::MAX` for patient-level draws.
fn substream(seed: u64, patient: usize, lab: u16, spot: u16) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((patient as u64) << 32) | ((lab as u64) << 16) | spot as u64);
    rng
}

struct PatientDraw {
    label: usize,
    expression: f64,
    /// One factor per peak; only background entries are used.
    factors: Vec<f64>,
    spots: Vec<usize>,
}

pub fn generate_cohort(config: &SynthConfig) -> Result<Cohort> {
    config.validate()?;
    let classes = config.class_names.len();
    let step = config.mz_step();
    let n = config.n_bins;
    let all_peaks: Vec<(Peak, Option<usize>)> = config
        .biomarkers
        .iter()
        .enumerate()
        .flat_map(|(c, ps)| ps.iter().map(move |p| (*p, Some(c))))
        .chain(config.background_peaks.iter().map(|p| (*p, None)))
        .collect();
    let patient_ln = LogNormal::new(0.0, config.patient_sd).expect("validated");
    let spot_ln = LogNormal::new(0.0, config.spot_sd).expect("validated");
    let background_ln = LogNormal::new(0.0, config.background_sd).expect("validated");
    let jitter_ln = LogNormal::new(0.0, config.baseline_jitter).expect("validated");
    let noise = Normal::new(0.0, config.noise_sd).expect("validated");

    let n_patients = classes * config.patients_per_class;
    let patients: Vec<PatientDraw> = (0..n_patients)
        .map(|p| {
            let mut rng = substream(config.seed, p, u16::MAX, u16::MAX);
            let label = p % classes;
            let expression = patient_ln.sample(&mut rng);
            let factors = all_peaks.iter().map(|_| background_ln.sample(&mut rng)).collect();
            let (lo, hi) = config.spots_per_patient;
            let spots = config.labs.iter().map(|_| rng.random_range(lo..=hi)).collect();
            PatientDraw {
                label,
                expression,
                factors,
                spots,
            }
        })
        .collect();

    let width = config.peak_width;
    let reach = (5.0 * width / step).ceil() as isize;
    let mut samples = Vec::new();
    for (li, lab) in config.labs.iter().enumerate() {
        for (p, draw) in patients.iter().enumerate() {
            // class 0 high in even labs, low in odd labs; the other classes mirror it
            let sign = if (draw.label == 0) == (li % 2 == 0) { 1.0 } else { -1.0 };
            let shift = 1.0 + sign * config.confounder_strength * config.baseline_coupling;
            for spot in 0..draw.spots[li] {
                let mut rng = substream(config.seed, p, li as u16, spot as u16);
                let mut x = vec![0.0; n];
                let base = lab.baseline_amplitude * shift * jitter_ln.sample(&mut rng);
                let expressed = rng.random::<f64>() < config.expression_rate;
                for (i, v) in x.iter_mut().enumerate() {
                    *v = base * (-(i as f64 * step) / lab.baseline_decay).exp();
                }
                for ((peak, owner), pf) in all_peaks.iter().zip(&draw.factors) {
                    let level = match owner {
                        Some(c) if *c == draw.label && expressed => draw.expression * spot_ln.sample(&mut rng),
                        Some(_) => config.absent_fraction * spot_ln.sample(&mut rng),
                        None => pf * background_ln.sample(&mut rng),
                    };
                    let amp = peak.amplitude * level;
                    for (mz, a) in isotopic_envelope(peak.mz, amp, config.envelope_decay, config.envelope_peaks) {
                        let centre = (mz - config.mz_start) / step;
                        let c = centre.round() as isize;
                        for i in (c - reach).max(0)..=(c + reach).min(n as isize - 1) {
                            let d = (i as f64 - centre) * step / width;
                            x[i as usize] += a * (-0.5 * d * d).exp();
                        }
                    }
                }
                for v in &mut x {
                    *v = (*v + noise.sample(&mut rng)).max(0.0);
                }
                let intensities = tic_normalize(&x)?;
                samples.push(CohortSample {
                    id: String::new(),
                    patient_id: format!("P{p:03}"),
                    lab_id: lab.name.clone(),
                    label: draw.label,
                    spectrum: Spectrum::new(intensities, config.mz_start, step)?,
                });
            }
        }
    }
    let width = samples.len().to_string().len().max(5);
    for (i, s) in samples.iter_mut().enumerate() {
        s.id = format!("S{i:0width$}");
    }
    Ok(Cohort {
        class_names: config.class_names.clone(),
        mz_start: config.mz_start,
        mz_step: step,
        n,
        samples,
    })
}

pub const META_FILE: &str = "meta.json";
pub const INTENSITIES_FILE: &str = "intensities.csv";

#[derive(Serialize, Deserialize)]
struct Meta {
    mz_start: f64,
    mz_step: f64,
    n: usize,
    class_names: Vec<String>,
    records: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    patient_id: String,
    lab_id: String,
    label: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `meta.json` and `intensities.csv` into `dir`, creating it.
pub fn export_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let records = cohort
        .samples
        .iter()
        .map(|s| {
            let r = Record {
                patient_id: s.patient_id.clone(),
                lab_id: s.lab_id.clone(),
                label: s.label,
            };
            (s.id.clone(), serde_json::to_value(r).expect("plain record"))
        })
        .collect();
    let meta = Meta {
        mz_start: cohort.mz_start,
        mz_step: cohort.mz_step,
        n: cohort.n,
        class_names: cohort.class_names.clone(),
        records,
    };
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("finite metadata");
    std::fs::write(&meta_path, text + "\n").map_err(io_err(&meta_path))?;

    let mut out = String::with_capacity(cohort.len() * cohort.n * 24);
    out.push_str("sample_id");
    for i in 0..cohort.n {
        write!(out, ",{}", cohort.mz_start + i as f64 * cohort.mz_step).expect("string write");
    }
    out.push('\n');
    for s in &cohort.samples {
        out.push_str(&s.id);
        for v in &s.spectrum.intensities {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    let csv_path = dir.join(INTENSITIES_FILE);
    std::fs::write(&csv_path, out).map_err(io_err(&csv_path))?;
    Ok(())
}

pub fn import_cohort(dir: &Path) -> Result<Cohort> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta_err = |detail: String| SynthError::Format {
        file: meta_path.display().to_string(),
        detail,
    };
    let meta: Meta = serde_json::from_str(&text).map_err(|e| meta_err(e.to_string()))?;
    if !(meta.mz_step > 0.0) || meta.n == 0 {
        return Err(meta_err(format!("m/z step {} and n {} must be positive", meta.mz_step, meta.n)));
    }
    let mut records = BTreeMap::new();
    for (id, value) in meta.records {
        let r: Record = serde_json::from_value(value).map_err(|e| meta_err(format!("record {id}: {e}")))?;
        if r.label >= meta.class_names.len() {
            return Err(meta_err(format!(
                "record {id}: label {} outside 0..{}",
                r.label,
                meta.class_names.len()
            )));
        }
        records.insert(id, r);
    }

    let csv_path = dir.join(INTENSITIES_FILE);
    let csv_err = |detail: String| SynthError::Format {
        file: csv_path.display().to_string(),
        detail,
    };
    let file = std::fs::File::open(&csv_path).map_err(io_err(&csv_path))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let header = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    if header.len() != meta.n + 1 || header.get(0) != Some("sample_id") {
        return Err(csv_err(format!(
            "header must be sample_id followed by {} bins, found {} columns",
            meta.n,
            header.len()
        )));
    }
    let mut samples = Vec::with_capacity(records.len());
    for (row, rec) in reader.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| csv_err(format!("line {line}: {e}")))?;
        let id = rec.get(0).unwrap_or_default().to_string();
        if rec.len() != meta.n + 1 {
            return Err(csv_err(format!(
                "line {line} (sample {id}): expected {} intensities, found {}",
                meta.n,
                rec.len().saturating_sub(1)
            )));
        }
        let values = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, t)| {
                t.parse::<f64>()
                    .map_err(|_| csv_err(format!("line {line} (sample {id}), bin {j}: {t:?} is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let r = records
            .remove(&id)
            .ok_or_else(|| csv_err(format!("line {line}: sample {id} has no record in {META_FILE}")))?;
        let spectrum = Spectrum::new(values, meta.mz_start, meta.mz_step)
            .map_err(|e| csv_err(format!("line {line} (sample {id}): {e}")))?;
        samples.push(CohortSample {
            id,
            patient_id: r.patient_id,
            lab_id: r.lab_id,
            label: r.label,
            spectrum,
        });
    }
    if let Some(id) = records.keys().next() {
        return Err(meta_err(format!("record {id} has no row in {INTENSITIES_FILE}")));
    }
    let cohort = Cohort {
        class_names: meta.class_names,
        mz_start: meta.mz_start,
        mz_step: meta.mz_step,
        n: meta.n,
        samples,
    };
    cohort.validate()?;
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_examples() {
        let env = isotopic_envelope(1000.0, 1.0, 0.5, 4);
        let amps: Vec<f64> = env.iter().map(|e| e.1).collect();
        assert_eq!(amps, vec![1.0, 0.5, 0.25, 0.125]);
        for (k, (mz, _)) in env.iter().enumerate() {
            assert_eq!(*mz, 1000.0 + k as f64 * ISOTOPE_SPACING_DA);
        }
        let total: f64 = isotopic_envelope(900.0, 3.0, 0.6, 5).iter().map(|e| e.1).sum();
        assert!((total - 3.0 * (1.0 + 0.6 + 0.36 + 0.216 + 0.1296)).abs() < 1e-12);
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = SynthConfig::default();
        cfg.validate().unwrap();
        assert!((cfg.mz_step() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.confounder_strength = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.biomarkers[0][0].mz = 2500.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.spots_per_patient = (5, 2);
        assert!(cfg.validate().is_err());
    }
}
