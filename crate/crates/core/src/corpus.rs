//! Parametric multi-speaker corpus where every speaker owns exactly one style.
//!
//! Mel frames are rendered from prosody and timbre by a closed-form rule, so
//! the inverse ([`extract_prosody_oracle`]) recovers prosody exactly and gives
//! the evaluation code a ground truth for "style of A in the voice of B".

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arrays::{self, DType};
use crate::error::{Error, Result};
use crate::prosody::{NormStats, ProsodyMatrix};
use crate::tensor::Tensor;

pub const SAMPLE_RATE_HZ: u32 = 16_000;
/// Lowest frequency of the log-frequency bin axis.
pub const AXIS_MIN_HZ: f64 = 60.0;
/// Highest frequency of the log-frequency bin axis.
pub const AXIS_MAX_HZ: f64 = 600.0;
/// Standard deviation of the harmonic bump, in bins.
pub const BUMP_WIDTH_BINS: f64 = 2.0;
/// Gain applied to the unit-norm timbre signature.
pub const SIGNATURE_GAIN: f64 = 0.2;
const MAX_SIGNATURE_COSINE: f64 = 0.5;
const PITCH_FLOOR_HZ: f64 = 100.0;
const PITCH_CEIL_HZ: f64 = 420.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub num_styles: usize,
    pub utterances_per_speaker: usize,
    pub phonemes_per_utterance_range: (usize, usize),
    pub phoneme_inventory_size: usize,
    pub mel_bins: usize,
    pub frame_rate_hz: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 3,
            num_styles: 3,
            utterances_per_speaker: 100,
            phonemes_per_utterance_range: (5, 10),
            phoneme_inventory_size: 24,
            mel_bins: 80,
            frame_rate_hz: 80.0,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 {
            return Err(Error::config("corpus.num_speakers", "must be at least 1"));
        }
        if self.num_styles != self.num_speakers {
            return Err(Error::config(
                "corpus.num_styles",
                format!(
                    "must equal corpus.num_speakers ({}): each speaker has exactly one style",
                    self.num_speakers
                ),
            ));
        }
        if self.num_styles > StyleProfile::ARCHETYPES {
            return Err(Error::config(
                "corpus.num_styles",
                format!("at most {} distinct styles are defined", StyleProfile::ARCHETYPES),
            ));
        }
        if self.utterances_per_speaker == 0 {
            return Err(Error::config("corpus.utterances_per_speaker", "must be at least 1"));
        }
        let (lo, hi) = self.phonemes_per_utterance_range;
        if lo < 2 || hi < lo {
            return Err(Error::config(
                "corpus.phonemes_per_utterance_range",
                format!("need 2 <= min <= max, got ({lo}, {hi})"),
            ));
        }
        if self.phoneme_inventory_size < 2 {
            return Err(Error::config("corpus.phoneme_inventory_size", "must be at least 2"));
        }
        if self.mel_bins < 8 {
            return Err(Error::config("corpus.mel_bins", "must be at least 8"));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(Error::config("corpus.frame_rate_hz", "must be positive"));
        }
        Ok(())
    }

    pub fn hop_length(&self) -> usize {
        (SAMPLE_RATE_HZ as f64 / self.frame_rate_hz).round() as usize
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("spec serializes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationPattern {
    Uniform,
    /// Long/short alternation ("poetry-like").
    Alternating,
    /// Progressively longer towards the end of the utterance.
    FinalLengthening,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyContour {
    Flat,
    Rising,
    Falling,
    Alternating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleProfile {
    pub style_id: usize,
    pub name: String,
    pub pitch_base: f64,
    pub pitch_phrase_slope: f64,
    pub pitch_jitter_sd: f64,
    pub duration_base: f64,
    pub duration_pattern: DurationPattern,
    pub energy_base: f64,
    pub energy_contour: EnergyContour,
}

impl StyleProfile {
    pub const ARCHETYPES: usize = 6;

    /// The fixed style table; `style_id` indexes it.
    pub fn archetype(style_id: usize) -> Self {
        use DurationPattern as D;
        use EnergyContour as E;
        let (name, pitch, slope, jitter, dur, pattern, energy, contour) = match style_id {
            0 => ("story", 135.0, -3.0, 5.0, 4.0, D::Uniform, 3.0, E::Falling),
            1 => ("anchor", 190.0, 0.0, 4.0, 3.0, D::Uniform, 4.5, E::Flat),
            2 => ("poetry", 160.0, 2.0, 5.0, 5.0, D::Alternating, 2.2, E::Alternating),
            3 => ("game", 235.0, 4.0, 7.0, 2.5, D::Uniform, 3.8, E::Rising),
            4 => ("customer_service", 115.0, -1.0, 4.0, 3.5, D::FinalLengthening, 2.6, E::Flat),
            5 => ("drama", 175.0, -5.0, 8.0, 4.5, D::Alternating, 5.0, E::Rising),
            _ => panic!("style {style_id} is not defined"),
        };
        Self {
            style_id,
            name: name.into(),
            pitch_base: pitch,
            pitch_phrase_slope: slope,
            pitch_jitter_sd: jitter,
            duration_base: dur,
            duration_pattern: pattern,
            energy_base: energy,
            energy_contour: contour,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pitch_base > 0.0) {
            return Err(Error::config("style.pitch_base", "must be positive"));
        }
        if !(self.duration_base >= 2.0) {
            return Err(Error::config("style.duration_base", "must be at least 2 frames"));
        }
        if !(self.energy_base > 0.0) {
            return Err(Error::config("style.energy_base", "must be positive"));
        }
        Ok(())
    }

    /// Number of prosody dimensions (pitch, duration, energy) whose
    /// parameters differ between two profiles.
    pub fn differing_dimensions(&self, other: &Self) -> usize {
        let pitch = self.pitch_base != other.pitch_base
            || self.pitch_phrase_slope != other.pitch_phrase_slope
            || self.pitch_jitter_sd != other.pitch_jitter_sd;
        let dur = self.duration_base != other.duration_base
            || self.duration_pattern != other.duration_pattern;
        let energy =
            self.energy_base != other.energy_base || self.energy_contour != other.energy_contour;
        [pitch, dur, energy].iter().filter(|&&b| b).count()
    }

    fn duration_multiplier(&self, pos: usize, len: usize) -> f64 {
        match self.duration_pattern {
            DurationPattern::Uniform => 1.0,
            DurationPattern::Alternating => {
                if pos.is_multiple_of(2) {
                    1.35
                } else {
                    0.65
                }
            }
            DurationPattern::FinalLengthening => 0.75 + 0.6 * frac(pos, len),
        }
    }

    fn energy_multiplier(&self, pos: usize, len: usize) -> f64 {
        match self.energy_contour {
            EnergyContour::Flat => 1.0,
            EnergyContour::Rising => 0.8 + 0.4 * frac(pos, len),
            EnergyContour::Falling => 1.2 - 0.4 * frac(pos, len),
            EnergyContour::Alternating => {
                if pos.is_multiple_of(2) {
                    1.15
                } else {
                    0.85
                }
            }
        }
    }
}

fn frac(pos: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        pos as f64 / (len - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTimbre {
    pub speaker_id: usize,
    /// Unit-norm additive pattern, one value per mel bin.
    pub spectral_signature: Vec<f64>,
    pub pitch_offset: f64,
}

impl SpeakerTimbre {
    const PITCH_OFFSETS: [f64; 6] = [0.0, 25.0, -15.0, 40.0, -30.0, 12.0];
}

/// Per-phoneme intrinsic multipliers shared by all speakers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeTraits {
    pub pitch_factor: f64,
    pub duration_factor: f64,
    pub energy_factor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub phonemes: Vec<usize>,
    pub speaker_id: usize,
    pub style_id: usize,
    pub prosody: ProsodyMatrix,
    pub mel: Tensor,
    pub phone_boundaries: Vec<usize>,
    pub split: Split,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.mel.rows()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub styles: Vec<StyleProfile>,
    pub timbres: Vec<SpeakerTimbre>,
    pub phoneme_traits: Vec<PhonemeTraits>,
    pub utterances: Vec<Utterance>,
    pub stats: NormStats,
}

impl Corpus {
    pub fn train(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(|u| u.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(|u| u.split == Split::Test)
    }

    pub fn timbre(&self, speaker_id: usize) -> Result<&SpeakerTimbre> {
        self.timbres
            .get(speaker_id)
            .ok_or_else(|| Error::input(format!("unknown speaker id {speaker_id}")))
    }

    /// Keep only the first `n` training utterances (test split is dropped).
    /// Normalization statistics are recomputed on what remains.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let utterances: Vec<_> = self.train().take(n).cloned().collect();
        let stats = NormStats::compute(utterances.iter().map(|u| &u.prosody))?;
        Ok(Self {
            utterances,
            stats,
            ..self.clone()
        })
    }
}

/// Log-frequency axis shared by the renderer, the oracle and the vocoder stub.
#[derive(Clone, Copy, Debug)]
pub struct BinAxis {
    pub bins: usize,
}

impl BinAxis {
    pub fn new(bins: usize) -> Self {
        Self { bins }
    }

    /// Continuous bin coordinate of a frequency.
    pub fn position(&self, hz: f64) -> f64 {
        (hz / AXIS_MIN_HZ).ln() / (AXIS_MAX_HZ / AXIS_MIN_HZ).ln() * (self.bins - 1) as f64
    }

    /// Nearest bin of a frequency.
    pub fn bin_of(&self, hz: f64) -> isize {
        self.position(hz).round() as isize
    }

    pub fn frequency(&self, position: f64) -> f64 {
        AXIS_MIN_HZ * (AXIS_MAX_HZ / AXIS_MIN_HZ).powf(position / (self.bins - 1) as f64)
    }

    /// Width of one bin around `hz`, in Hz.
    pub fn bin_width_hz(&self, hz: f64) -> f64 {
        let p = self.position(hz);
        self.frequency(p + 0.5) - self.frequency(p - 0.5)
    }
}

/// Unit-norm Gaussian bump centred at a continuous bin position.
pub fn unit_bump(center: f64, bins: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..bins)
        .map(|b| {
            let d = b as f64 - center;
            (-d * d / (2.0 * BUMP_WIDTH_BINS * BUMP_WIDTH_BINS)).exp()
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedMel {
    pub mel: Tensor,
    pub phone_boundaries: Vec<usize>,
}

/// Render mel frames from prosody and timbre.
///
/// Each phoneme contributes `duration` identical frames: a Gaussian bump at
/// the bin of `pitch + pitch_offset`, scaled to L2 norm `energy`, plus the
/// speaker signature times [`SIGNATURE_GAIN`].
pub fn render_mel(prosody: &ProsodyMatrix, timbre: &SpeakerTimbre, mel_bins: usize) -> Result<RenderedMel> {
    if timbre.spectral_signature.len() != mel_bins {
        return Err(Error::input(format!(
            "signature has {} bins, expected {mel_bins}",
            timbre.spectral_signature.len()
        )));
    }
    prosody.validate_linear()?;
    let axis = BinAxis::new(mel_bins);
    let total: usize = prosody.durations_frames().iter().sum();
    let mut mel = Tensor::zeros(total, mel_bins);
    let mut boundaries = Vec::with_capacity(prosody.len() + 1);
    boundaries.push(0);
    let mut t = 0;
    for i in 0..prosody.len() {
        let hz = prosody.pitch(i) + timbre.pitch_offset;
        let center = axis.position(hz);
        if !(center >= 1.0 && center <= (mel_bins - 2) as f64) {
            return Err(Error::Range(format!(
                "phoneme {i}: {hz:.1} Hz maps to bin {center:.2}, outside [1, {}]",
                mel_bins - 2
            )));
        }
        let bump = unit_bump(center, mel_bins);
        let frame: Vec<f64> = bump
            .iter()
            .zip(&timbre.spectral_signature)
            .map(|(b, s)| prosody.energy(i) * b + SIGNATURE_GAIN * s)
            .collect();
        let d = prosody.duration(i) as usize;
        for _ in 0..d {
            mel.row_mut(t).copy_from_slice(&frame);
            t += 1;
        }
        boundaries.push(t);
    }
    Ok(RenderedMel {
        mel,
        phone_boundaries: boundaries,
    })
}

/// Pitch (Hz, before removing the speaker offset) and norm of one frame
/// after signature removal. `None` when the frame carries no bump.
pub fn analyze_frame(frame: &[f64], timbre: &SpeakerTimbre) -> Option<(f64, f64)> {
    let bins = frame.len();
    let lo = frame.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = frame.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-9) {
        return None;
    }
    let residual: Vec<f64> = frame
        .iter()
        .zip(&timbre.spectral_signature)
        .map(|(m, s)| m - SIGNATURE_GAIN * s)
        .collect();
    let (peak, &peak_val) = residual
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    if !(peak_val > 0.0) {
        return None;
    }
    let mut pos = peak as f64;
    if peak >= 1 && peak + 1 < bins {
        let (a, b, c) = (residual[peak - 1], residual[peak], residual[peak + 1]);
        if a > 0.0 && c > 0.0 {
            // exact for a sampled Gaussian: log is a parabola
            let (la, lb, lc) = (a.ln(), b.ln(), c.ln());
            let denom = la - 2.0 * lb + lc;
            if denom < 0.0 {
                pos += (0.5 * (la - lc) / denom).clamp(-0.5, 0.5);
            }
        }
    }
    let norm = residual.iter().map(|x| x * x).sum::<f64>().sqrt();
    Some((BinAxis::new(bins).frequency(pos), norm))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Recover phoneme-level prosody from a mel and its phone boundaries.
pub fn extract_prosody_oracle(mel: &Tensor, phone_boundaries: &[usize], timbre: &SpeakerTimbre) -> Result<ProsodyMatrix> {
    if phone_boundaries.len() < 2 {
        return Err(Error::Alignment("need at least one phoneme span".into()));
    }
    if *phone_boundaries.last().expect("non-empty") > mel.rows() {
        return Err(Error::Alignment(format!(
            "boundary {} beyond {} frames",
            phone_boundaries.last().expect("non-empty"),
            mel.rows()
        )));
    }
    if timbre.spectral_signature.len() != mel.cols() {
        return Err(Error::input("signature length does not match mel bins"));
    }
    let mut rows = Vec::with_capacity(phone_boundaries.len() - 1);
    for (i, w) in phone_boundaries.windows(2).enumerate() {
        let (start, end) = (w[0], w[1]);
        if end <= start {
            return Err(Error::Alignment(format!("phoneme {i} has an empty span [{start}, {end})")));
        }
        let mut pitches = Vec::with_capacity(end - start);
        let mut norms = Vec::with_capacity(end - start);
        for t in start..end {
            if let Some((hz, norm)) = analyze_frame(mel.row(t), timbre) {
                pitches.push(hz - timbre.pitch_offset);
                norms.push(norm);
            }
        }
        if pitches.is_empty() {
            return Err(Error::PitchExtraction(format!(
                "phoneme {i} (frames {start}..{end}) has no pitch peak"
            )));
        }
        rows.push([median(&mut pitches), (end - start) as f64, median(&mut norms)]);
    }
    Ok(ProsodyMatrix::from_rows(&rows))
}

/// Generate the full corpus for `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let styles: Vec<StyleProfile> = (0..spec.num_styles).map(StyleProfile::archetype).collect();
    for s in &styles {
        s.validate()?;
    }
    let timbres = make_timbres(spec, &mut rng)?;
    let phoneme_traits: Vec<PhonemeTraits> = (0..spec.phoneme_inventory_size)
        .map(|_| PhonemeTraits {
            pitch_factor: rng.gen_range(0.88..1.12),
            duration_factor: rng.gen_range(0.75..1.35),
            energy_factor: rng.gen_range(0.85..1.15),
        })
        .collect();

    let mut utterances = Vec::with_capacity(spec.num_speakers * spec.utterances_per_speaker);
    for speaker in 0..spec.num_speakers {
        // diagonal pairing: speaker k only ever speaks in style k
        let style = &styles[speaker];
        let mut ids: Vec<String> = (0..spec.utterances_per_speaker)
            .map(|i| format!("spk{speaker}_utt{i:04}"))
            .collect();
        let n_test = (spec.utterances_per_speaker as f64 / 10.0).round() as usize;
        let mut by_hash = ids.clone();
        by_hash.sort_by_key(|id| (stable_hash(id.as_bytes()), id.clone()));
        let test_ids: std::collections::BTreeSet<String> = by_hash.into_iter().take(n_test).collect();
        for utt_id in ids.drain(..) {
            let mut urng = ChaCha8Rng::seed_from_u64(spec.seed ^ stable_hash(utt_id.as_bytes()));
            let (lo, hi) = spec.phonemes_per_utterance_range;
            let n = urng.gen_range(lo..=hi);
            let phonemes: Vec<usize> = (0..n)
                .map(|_| urng.gen_range(0..spec.phoneme_inventory_size))
                .collect();
            let prosody = sample_prosody(style, &phonemes, &phoneme_traits, &mut urng);
            let rendered = render_mel(&prosody, &timbres[speaker], spec.mel_bins)?;
            let split = if test_ids.contains(&utt_id) {
                Split::Test
            } else {
                Split::Train
            };
            utterances.push(Utterance {
                utt_id,
                phonemes,
                speaker_id: speaker,
                style_id: style.style_id,
                prosody,
                mel: rendered.mel,
                phone_boundaries: rendered.phone_boundaries,
                split,
            });
        }
    }
    let stats = NormStats::compute(
        utterances
            .iter()
            .filter(|u| u.split == Split::Train)
            .map(|u| &u.prosody),
    )?;
    Ok(Corpus {
        spec: spec.clone(),
        styles,
        timbres,
        phoneme_traits,
        utterances,
        stats,
    })
}

fn make_timbres(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SpeakerTimbre>> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut sigs: Vec<Vec<f64>> = Vec::new();
    let mut attempts = 0;
    while sigs.len() < spec.num_speakers {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::config(
                "corpus.mel_bins",
                "too few bins to draw sufficiently distinct speaker signatures",
            ));
        }
        let mut v: Vec<f64> = (0..spec.mel_bins).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        if sigs.iter().all(|s| cosine(s, &v) < MAX_SIGNATURE_COSINE) {
            sigs.push(v);
        }
    }
    Ok(sigs
        .into_iter()
        .enumerate()
        .map(|(i, spectral_signature)| SpeakerTimbre {
            speaker_id: i,
            spectral_signature,
            pitch_offset: SpeakerTimbre::PITCH_OFFSETS[i % SpeakerTimbre::PITCH_OFFSETS.len()],
        })
        .collect())
}

/// Draw prosody for one utterance in the given style.
pub fn sample_prosody(
    style: &StyleProfile,
    phonemes: &[usize],
    traits: &[PhonemeTraits],
    rng: &mut impl Rng,
) -> ProsodyMatrix {
    let n = phonemes.len();
    let jitter = Normal::new(0.0, style.pitch_jitter_sd.max(1e-12)).expect("valid jitter");
    let energy_noise = Normal::new(0.0, 0.03).expect("valid noise");
    let rows: Vec<[f64; 3]> = phonemes
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let tr = &traits[p];
            let pitch = (style.pitch_base * tr.pitch_factor
                + style.pitch_phrase_slope * i as f64
                + jitter.sample(rng))
            .clamp(PITCH_FLOOR_HZ, PITCH_CEIL_HZ);
            let dur = (style.duration_base * tr.duration_factor * style.duration_multiplier(i, n))
                .round()
                .max(1.0);
            let energy = style.energy_base
                * tr.energy_factor
                * style.energy_multiplier(i, n)
                * (1.0f64 + energy_noise.sample(rng)).max(0.5);
            [pitch, dur, energy]
        })
        .collect();
    ProsodyMatrix::from_rows(&rows)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn stable_hash(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

// ---------------------------------------------------------------------------
// On-disk layout

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub speaker_id: usize,
    pub style_id: usize,
    pub phonemes: Vec<usize>,
    pub mel_path: String,
    pub prosody_path: String,
    pub boundaries_path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub stats: NormStats,
    pub spec_fingerprint: String,
    /// Hash of the sorted training utterance ids the statistics came from.
    pub train_split_fingerprint: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ProfilesFile {
    spec: CorpusSpec,
    styles: Vec<StyleProfile>,
    timbres: Vec<SpeakerTimbre>,
    phoneme_traits: Vec<PhonemeTraits>,
}

pub fn train_split_fingerprint<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut ids: Vec<&str> = ids.collect();
    ids.sort_unstable();
    sha256_hex(ids.join("\n").as_bytes())
}

/// Write `manifest.jsonl`, `stats.json`, `profiles.json` and per-utterance arrays.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("arrays")).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for u in &corpus.utterances {
        let rec = ManifestRecord {
            utt_id: u.utt_id.clone(),
            speaker_id: u.speaker_id,
            style_id: u.style_id,
            phonemes: u.phonemes.clone(),
            mel_path: format!("arrays/{}.mel", u.utt_id),
            prosody_path: format!("arrays/{}.prosody", u.utt_id),
            boundaries_path: format!("arrays/{}.bounds", u.utt_id),
            split: u.split,
        };
        arrays::write(&dir.join(&rec.mel_path), &u.mel, DType::F64)?;
        arrays::write(&dir.join(&rec.prosody_path), u.prosody.as_tensor(), DType::F64)?;
        let bounds: Vec<f64> = u.phone_boundaries.iter().map(|&b| b as f64).collect();
        arrays::write(
            &dir.join(&rec.boundaries_path),
            &Tensor::row_vector(&bounds),
            DType::F64,
        )?;
        manifest.push_str(&serde_json::to_string(&rec)?);
        manifest.push('\n');
    }
    write_file(&dir.join("manifest.jsonl"), manifest.as_bytes())?;
    let stats = StatsFile {
        stats: corpus.stats.clone(),
        spec_fingerprint: corpus.spec.fingerprint(),
        train_split_fingerprint: train_split_fingerprint(corpus.train().map(|u| u.utt_id.as_str())),
    };
    write_file(&dir.join("stats.json"), &serde_json::to_vec_pretty(&stats)?)?;
    let profiles = ProfilesFile {
        spec: corpus.spec.clone(),
        styles: corpus.styles.clone(),
        timbres: corpus.timbres.clone(),
        phoneme_traits: corpus.phoneme_traits.clone(),
    };
    write_file(&dir.join("profiles.json"), &serde_json::to_vec_pretty(&profiles)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn read_stats(dir: &Path) -> Result<StatsFile> {
    let path = dir.join("stats.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("profiles.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let profiles: ProfilesFile = serde_json::from_slice(&bytes)?;
    let stats = read_stats(dir)?;
    if stats.spec_fingerprint != profiles.spec.fingerprint() {
        return Err(Error::Integrity {
            path: dir.join("stats.json"),
            reason: "spec fingerprint does not match profiles.json".into(),
        });
    }
    let mut utterances = Vec::new();
    for rec in read_manifest(dir)? {
        let mel = arrays::read(&dir.join(&rec.mel_path))?;
        let prosody = ProsodyMatrix::from_tensor(arrays::read(&dir.join(&rec.prosody_path))?)?;
        let bounds = arrays::read(&dir.join(&rec.boundaries_path))?;
        utterances.push(Utterance {
            utt_id: rec.utt_id,
            phonemes: rec.phonemes,
            speaker_id: rec.speaker_id,
            style_id: rec.style_id,
            prosody,
            mel,
            phone_boundaries: bounds.data().iter().map(|&b| b as usize).collect(),
            split: rec.split,
        });
    }
    let corpus = Corpus {
        spec: profiles.spec,
        styles: profiles.styles,
        timbres: profiles.timbres,
        phoneme_traits: profiles.phoneme_traits,
        utterances,
        stats: stats.stats,
    };
    let fp = train_split_fingerprint(corpus.train().map(|u| u.utt_id.as_str()));
    if fp != stats.train_split_fingerprint {
        return Err(Error::Integrity {
            path: dir.join("stats.json"),
            reason: "normalization statistics were not computed on this training split".into(),
        });
    }
    Ok(corpus)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Group-by helper used by several tests and the evaluation code.
pub fn count_by<K: Ord, T>(items: impl Iterator<Item = T>, key: impl Fn(&T) -> K) -> BTreeMap<K, usize> {
    let mut out = BTreeMap::new();
    for it in items {
        *out.entry(key(&it)).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn timbre(bins: usize, offset: f64, seed: u64) -> SpeakerTimbre {
        let spec = CorpusSpec {
            num_speakers: 1,
            num_styles: 1,
            mel_bins: bins,
            seed,
            ..CorpusSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = make_timbres(&spec, &mut rng).unwrap().remove(0);
        t.pitch_offset = offset;
        t
    }

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            num_speakers: 2,
            num_styles: 2,
            utterances_per_speaker: 20,
            phonemes_per_utterance_range: (5, 10),
            mel_bins: 40,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn split_counts_are_exact() {
        let spec = CorpusSpec {
            num_speakers: 3,
            num_styles: 3,
            utterances_per_speaker: 100,
            mel_bins: 32,
            seed: 7,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        assert_eq!(c.utterances.len(), 300);
        assert_eq!(c.train().count(), 270);
        assert_eq!(c.test().count(), 30);
        assert!(c.utterances.iter().all(|u| u.speaker_id == u.style_id));
    }

    #[test]
    fn lengths_respect_range_and_durations() {
        let c = generate_corpus(&small_spec()).unwrap();
        for u in &c.utterances {
            let n = u.phonemes.len();
            assert!((5..=10).contains(&n));
            let total: usize = u.prosody.durations_frames().iter().sum();
            assert_eq!(u.num_frames(), total);
            assert_eq!(u.phone_boundaries.len(), n + 1);
            assert_eq!(u.phone_boundaries[0], 0);
            assert_eq!(*u.phone_boundaries.last().unwrap(), total);
            assert!(u.phone_boundaries.windows(2).all(|w| w[1] > w[0]));
            u.prosody.validate_linear().unwrap();
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let bad = CorpusSpec {
            num_speakers: 0,
            ..CorpusSpec::default()
        };
        let err = generate_corpus(&bad).unwrap_err().to_string();
        assert!(err.contains("corpus.num_speakers"), "{err}");
        let bad = CorpusSpec {
            num_styles: 2,
            ..CorpusSpec::default()
        };
        assert!(generate_corpus(&bad).unwrap_err().to_string().contains("corpus.num_styles"));
        let bad = CorpusSpec {
            mel_bins: 7,
            ..CorpusSpec::default()
        };
        assert!(generate_corpus(&bad).unwrap_err().to_string().contains("corpus.mel_bins"));
        let bad = CorpusSpec {
            phonemes_per_utterance_range: (1, 4),
            ..CorpusSpec::default()
        };
        assert!(generate_corpus(&bad)
            .unwrap_err()
            .to_string()
            .contains("corpus.phonemes_per_utterance_range"));
    }

    #[test]
    fn styles_and_timbres_satisfy_invariants() {
        for a in 0..StyleProfile::ARCHETYPES {
            StyleProfile::archetype(a).validate().unwrap();
            for b in 0..a {
                assert!(
                    StyleProfile::archetype(a).differing_dimensions(&StyleProfile::archetype(b)) >= 2,
                    "styles {a} and {b}"
                );
            }
        }
        let spec = CorpusSpec {
            num_speakers: 6,
            num_styles: 6,
            utterances_per_speaker: 2,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        for (i, a) in c.timbres.iter().enumerate() {
            let n = a.spectral_signature.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            for b in &c.timbres[..i] {
                assert!(cosine(&a.spectral_signature, &b.spectral_signature) < 0.5);
            }
        }
    }

    #[test]
    fn single_phoneme_render_places_bump() {
        let tb = timbre(80, 10.0, 3);
        let p = ProsodyMatrix::from_rows(&[[200.0, 4.0, 1.0]]);
        let r = render_mel(&p, &tb, 80).unwrap();
        assert_eq!(r.mel.shape(), (4, 80));
        assert_eq!(r.phone_boundaries, vec![0, 4]);
        let axis = BinAxis::new(80);
        for t in 0..4 {
            let stripped: Vec<f64> = r
                .mel
                .row(t)
                .iter()
                .zip(&tb.spectral_signature)
                .map(|(m, s)| m - SIGNATURE_GAIN * s)
                .collect();
            let arg = stripped
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(arg as isize, axis.bin_of(210.0));
            let norm = stripped.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_energy_doubles_stripped_norms() {
        let tb = timbre(32, 0.0, 4);
        let p1 = ProsodyMatrix::from_rows(&[[150.0, 3.0, 1.3], [180.0, 2.0, 2.0]]);
        let mut p2 = p1.clone();
        p2.scale_column(crate::prosody::ENERGY, 2.0);
        let a = render_mel(&p1, &tb, 32).unwrap();
        let b = render_mel(&p2, &tb, 32).unwrap();
        for t in 0..a.mel.rows() {
            let na: f64 = a
                .mel
                .row(t)
                .iter()
                .zip(&tb.spectral_signature)
                .map(|(m, s)| (m - SIGNATURE_GAIN * s).powi(2))
                .sum::<f64>()
                .sqrt();
            let nb: f64 = b
                .mel
                .row(t)
                .iter()
                .zip(&tb.spectral_signature)
                .map(|(m, s)| (m - SIGNATURE_GAIN * s).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((nb - 2.0 * na).abs() < 1e-12);
        }
    }

    #[test]
    fn speakers_differ_only_by_signature() {
        let a = timbre(32, 5.0, 5);
        let mut b = timbre(32, 5.0, 6);
        b.speaker_id = 1;
        let p = ProsodyMatrix::from_rows(&[[150.0, 3.0, 1.3], [220.0, 2.0, 2.0]]);
        let ma = render_mel(&p, &a, 32).unwrap().mel;
        let mb = render_mel(&p, &b, 32).unwrap().mel;
        assert_ne!(ma, mb);
        for t in 0..ma.rows() {
            for k in 0..32 {
                let ra = ma.get(t, k) - SIGNATURE_GAIN * a.spectral_signature[k];
                let rb = mb.get(t, k) - SIGNATURE_GAIN * b.spectral_signature[k];
                assert!((ra - rb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_axis_pitch_is_a_range_error() {
        let tb = timbre(32, 0.0, 1);
        let p = ProsodyMatrix::from_rows(&[[59.0, 2.0, 1.0]]);
        assert!(matches!(render_mel(&p, &tb, 32), Err(Error::Range(_))));
        let p = ProsodyMatrix::from_rows(&[[590.0, 2.0, 1.0]]);
        assert!(matches!(render_mel(&p, &tb, 32), Err(Error::Range(_))));
    }

    #[test]
    fn extraction_degenerate_cases() {
        let tb = timbre(32, 0.0, 2);
        let p = ProsodyMatrix::from_rows(&[[180.0, 1.0, 2.5]]);
        let r = render_mel(&p, &tb, 32).unwrap();
        let back = extract_prosody_oracle(&r.mel, &r.phone_boundaries, &tb).unwrap();
        assert_eq!(back.duration(0), 1.0);
        assert!((back.energy(0) - 2.5).abs() < 1e-9);

        let zeros = Tensor::zeros(4, 32);
        let err = extract_prosody_oracle(&zeros, &[0, 2, 4], &tb).unwrap_err();
        assert!(matches!(err, Error::PitchExtraction(_)), "{err}");

        let err = extract_prosody_oracle(&r.mel, &[0, 0, 1], &tb).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn oracle_inverts_renderer(
            rows in proptest::collection::vec((100.0f64..400.0, 1u32..9, 0.2f64..6.0), 1..8),
            offset in -30.0f64..40.0,
            bins in prop_oneof![Just(16usize), Just(32), Just(80)],
            seed in 0u64..50,
        ) {
            let tb = timbre(bins, offset, seed);
            let data: Vec<[f64; 3]> = rows.iter().map(|&(p, d, e)| [p, d as f64, e]).collect();
            let p = ProsodyMatrix::from_rows(&data);
            let r = render_mel(&p, &tb, bins).unwrap();
            let back = extract_prosody_oracle(&r.mel, &r.phone_boundaries, &tb).unwrap();
            let axis = BinAxis::new(bins);
            for i in 0..p.len() {
                prop_assert_eq!(back.duration(i), p.duration(i));
                let bin_err = (axis.position(back.pitch(i) + offset) - axis.position(p.pitch(i) + offset)).abs();
                prop_assert!(bin_err <= 0.5, "pitch bin error {}", bin_err);
                prop_assert!((back.energy(i) - p.energy(i)).abs() <= 1e-6 * p.energy(i));
            }
        }
    }

    #[test]
    fn write_and_load_round_trip_is_deterministic() {
        let spec = small_spec();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let c = generate_corpus(&spec).unwrap();
        write_corpus(&c, dir1.path()).unwrap();
        write_corpus(&generate_corpus(&spec).unwrap(), dir2.path()).unwrap();
        for f in ["manifest.jsonl", "stats.json", "profiles.json", "arrays/spk1_utt0003.mel"] {
            assert_eq!(
                fs::read(dir1.path().join(f)).unwrap(),
                fs::read(dir2.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let loaded = load_corpus(dir1.path()).unwrap();
        assert_eq!(loaded.utterances, c.utterances);
        assert_eq!(loaded.stats, c.stats);
        let stats = read_stats(dir1.path()).unwrap();
        let manifest = read_manifest(dir1.path()).unwrap();
        let fp = train_split_fingerprint(
            manifest
                .iter()
                .filter(|r| r.split == Split::Train)
                .map(|r| r.utt_id.as_str()),
        );
        assert_eq!(fp, stats.train_split_fingerprint);
    }
}
