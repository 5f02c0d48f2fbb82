//! Synthetic speakers.
//!
//! Every speaker `s` owns an offset `b_s` and a small linear warp `G_s`. A
//! frame with content `c` has the speaker-independent average
//! `x̄₀ = W_c c` and is observed as `x = (I + G_s) x̄₀ + b_s + σ z`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{sha256_hex, Dec17, Dec17Rows};
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::rng::{normal, normal_vec, seeded};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_speakers: usize,
    pub feature_dim: usize,
    pub content_dim: usize,
    pub offset_scale: f64,
    pub warp_strength: f64,
    pub obs_noise: f64,
    pub frames_per_utterance: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_speakers: 10,
            feature_dim: 16,
            content_dim: 4,
            offset_scale: 1.0,
            warp_strength: 0.1,
            obs_noise: 0.05,
            frames_per_utterance: 4,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Names of fields that violate their constraints.
    pub fn invalid_fields(&self) -> Vec<&'static str> {
        let mut bad = vec![];
        if self.n_speakers < 2 {
            bad.push("n_speakers");
        }
        if self.feature_dim < 1 {
            bad.push("feature_dim");
        }
        if self.content_dim < 1 {
            bad.push("content_dim");
        }
        if self.frames_per_utterance < 1 {
            bad.push("frames_per_utterance");
        }
        for (name, v) in [
            ("offset_scale", self.offset_scale),
            ("warp_strength", self.warp_strength),
            ("obs_noise", self.obs_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(name);
            }
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.invalid_fields();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid world config fields: {}", bad.join(", "))))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Speaker {
    pub id: usize,
    pub offset: Vec<f64>,
    /// `G_s`, `[d, d]`.
    pub warp: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    /// `W_c`, `[d, k]` with unit-norm columns.
    pub content_proj: Tensor,
    pub speakers: Vec<Speaker>,
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let (d, k) = (cfg.feature_dim, cfg.content_dim);
    let mut rng = seeded(cfg.seed);

    let mut w = normal_vec(&mut rng, d * k);
    for col in 0..k {
        let norm = (0..d).map(|r| w[r * k + col].powi(2)).sum::<f64>().sqrt();
        for r in 0..d {
            w[r * k + col] /= norm;
        }
    }
    let content_proj = Tensor::matrix(d, k, w)?;

    let warp_sd = cfg.warp_strength / (d as f64).sqrt();
    let speakers = (0..cfg.n_speakers)
        .map(|id| {
            let offset = normal_vec(&mut rng, d).into_iter().map(|v| v * cfg.offset_scale).collect();
            let warp = Tensor::matrix(d, d, normal_vec(&mut rng, d * d).into_iter().map(|v| v * warp_sd).collect())?;
            Ok(Speaker { id, offset, warp })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(World { config: cfg.clone(), content_proj, speakers })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub x: Vec<f64>,
    pub xbar0: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker_id: usize,
    pub frames: Vec<Frame>,
}

impl Utterance {
    /// Observed frames as an `[n, d]` matrix.
    pub fn x_matrix(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.frames.iter().map(|f| &f.x[..]).collect::<Vec<_>>())
    }

    pub fn xbar0_matrix(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.frames.iter().map(|f| &f.xbar0[..]).collect::<Vec<_>>())
    }
}

impl World {
    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn speaker(&self, id: usize) -> Result<&Speaker> {
        self.speakers.get(id).ok_or(Error::Lookup { kind: "speaker", id })
    }

    /// `W_c c`.
    pub fn average_of(&self, content: &[f64]) -> Vec<f64> {
        (0..self.config.feature_dim)
            .map(|r| self.content_proj.row(r).iter().zip(content).map(|(w, c)| w * c).sum())
            .collect()
    }

    /// Noise-free rendering `(I + G_s) x̄₀ + b_s`.
    pub fn render(&self, speaker_id: usize, xbar0: &[f64]) -> Result<Vec<f64>> {
        let spk = self.speaker(speaker_id)?;
        Ok((0..self.config.feature_dim)
            .map(|r| {
                let warped: f64 = spk.warp.row(r).iter().zip(xbar0).map(|(g, v)| g * v).sum();
                xbar0[r] + warped + spk.offset[r]
            })
            .collect())
    }
}

pub fn synth_utterance<R: Rng + ?Sized>(world: &World, speaker_id: usize, rng: &mut R) -> Result<Utterance> {
    world.speaker(speaker_id)?;
    let cfg = &world.config;
    let frames = (0..cfg.frames_per_utterance)
        .map(|_| {
            let c = normal_vec(rng, cfg.content_dim);
            let xbar0 = world.average_of(&c);
            let mut x = world.render(speaker_id, &xbar0)?;
            if cfg.obs_noise > 0.0 {
                for v in &mut x {
                    *v += cfg.obs_noise * normal(rng);
                }
            }
            Ok(Frame { x, xbar0, c })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Utterance { speaker_id, frames })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub world: World,
    pub split: f64,
    pub utterances_per_speaker: usize,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Frames flattened out of a set of utterances.
#[derive(Clone, Debug)]
pub struct FrameSet {
    pub x: Tensor,
    pub xbar0: Tensor,
    pub speakers: Vec<usize>,
}

impl FrameSet {
    pub fn from_utterances(utts: &[Utterance]) -> Result<Self> {
        let frames: Vec<(&Frame, usize)> =
            utts.iter().flat_map(|u| u.frames.iter().map(move |f| (f, u.speaker_id))).collect();
        Ok(Self {
            x: Tensor::from_rows(&frames.iter().map(|(f, _)| &f.x[..]).collect::<Vec<_>>())?,
            xbar0: Tensor::from_rows(&frames.iter().map(|(f, _)| &f.xbar0[..]).collect::<Vec<_>>())?,
            speakers: frames.iter().map(|&(_, s)| s).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

/// Generates `utterances_per_speaker` utterances for every speaker and
/// splits each speaker's list so that `round(split * n)` (at least one, at
/// most `n - 1`) go to training.
pub fn make_dataset<R: Rng + ?Sized>(
    world: &World,
    utterances_per_speaker: usize,
    split: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::contract(format!("split must lie in (0, 1), got {split}")));
    }
    if utterances_per_speaker < 2 {
        return Err(Error::contract("need at least two utterances per speaker for a train/test split"));
    }
    let n_train = ((split * utterances_per_speaker as f64).round() as usize).clamp(1, utterances_per_speaker - 1);
    let mut train = vec![];
    let mut test = vec![];
    for s in 0..world.n_speakers() {
        for i in 0..utterances_per_speaker {
            let u = synth_utterance(world, s, rng)?;
            if i < n_train {
                train.push(u);
            } else {
                test.push(u);
            }
        }
    }
    Ok(Dataset { world: world.clone(), split, utterances_per_speaker, train, test })
}

// ---- file format ---------------------------------------------------------

#[derive(Serialize)]
struct SpeakerOut<'a> {
    id: usize,
    offset: Dec17<'a>,
    warp: Dec17Rows<'a>,
}

#[derive(Serialize)]
struct WorldOut<'a> {
    config: &'a WorldConfig,
    content_proj: Dec17Rows<'a>,
    speakers: Vec<SpeakerOut<'a>>,
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    format_version: u32,
    world: WorldOut<'a>,
    split: f64,
    utterances_per_speaker: usize,
    n_train: usize,
    n_test: usize,
}

#[derive(Serialize)]
struct FrameOut<'a> {
    x: Dec17<'a>,
    xbar0: Dec17<'a>,
    c: Dec17<'a>,
}

#[derive(Serialize)]
struct UtteranceOut<'a> {
    split: &'a str,
    speaker_id: usize,
    frames: Vec<FrameOut<'a>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeakerIn {
    id: usize,
    offset: Vec<f64>,
    warp: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldIn {
    config: WorldConfig,
    content_proj: Vec<Vec<f64>>,
    speakers: Vec<SpeakerIn>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderIn {
    format_version: u32,
    world: WorldIn,
    split: f64,
    utterances_per_speaker: usize,
    n_train: usize,
    n_test: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceIn {
    split: String,
    speaker_id: usize,
    frames: Vec<Frame>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn matrix_from(rows: Vec<Vec<f64>>, n: usize, m: usize, line: usize, field: &str) -> Result<Tensor> {
    if rows.len() != n || rows.iter().any(|r| r.len() != m) {
        return Err(Error::format(line, format!("field `{field}` must be {n}x{m}")));
    }
    Tensor::from_rows(&rows).map_err(|e| Error::format(line, format!("field `{field}`: {e}")))
}

impl Dataset {
    /// First line of the dataset file: format version, world and split.
    pub fn header_line(&self) -> String {
        let content = rows_of(&self.world.content_proj);
        let warps: Vec<Vec<Vec<f64>>> = self.world.speakers.iter().map(|s| rows_of(&s.warp)).collect();
        let header = HeaderOut {
            format_version: DATASET_FORMAT_VERSION,
            world: WorldOut {
                config: &self.world.config,
                content_proj: Dec17Rows(&content),
                speakers: self
                    .world
                    .speakers
                    .iter()
                    .zip(&warps)
                    .map(|(s, w)| SpeakerOut { id: s.id, offset: Dec17(&s.offset), warp: Dec17Rows(w) })
                    .collect(),
            },
            split: self.split,
            utterances_per_speaker: self.utterances_per_speaker,
            n_train: self.train.len(),
            n_test: self.test.len(),
        };
        serde_json::to_string(&header).expect("header serialization is infallible")
    }

    /// SHA-256 of the header line; identifies the world and split.
    pub fn world_fingerprint(&self) -> String {
        sha256_hex(self.header_line().as_bytes())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = self.header_line();
        out.push('\n');
        let tagged = self.train.iter().map(|u| ("train", u)).chain(self.test.iter().map(|u| ("test", u)));
        for (split, u) in tagged {
            let line = UtteranceOut {
                split,
                speaker_id: u.speaker_id,
                frames: u
                    .frames
                    .iter()
                    .map(|f| FrameOut { x: Dec17(&f.x), xbar0: Dec17(&f.xbar0), c: Dec17(&f.c) })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("utterance serialization is infallible"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, first) = lines.next().ok_or_else(|| Error::format(1, "empty dataset file"))?;
        let header: HeaderIn = serde_json::from_str(first).map_err(|e| Error::format(1, e.to_string()))?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                1,
                format!("field `format_version`: {} unsupported (expected {DATASET_FORMAT_VERSION})", header.format_version),
            ));
        }
        let cfg = header.world.config;
        cfg.validate().map_err(|e| Error::format(1, format!("field `world.config`: {e}")))?;
        let (d, k) = (cfg.feature_dim, cfg.content_dim);
        let content_proj = matrix_from(header.world.content_proj, d, k, 1, "world.content_proj")?;
        if header.world.speakers.len() != cfg.n_speakers {
            return Err(Error::format(1, "field `world.speakers`: count differs from n_speakers"));
        }
        let speakers = header
            .world
            .speakers
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                if s.id != i || s.offset.len() != d {
                    return Err(Error::format(1, format!("field `world.speakers[{i}]`: bad id or offset length")));
                }
                let warp = matrix_from(s.warp, d, d, 1, "world.speakers.warp")?;
                Ok(Speaker { id: s.id, offset: s.offset, warp })
            })
            .collect::<Result<Vec<_>>>()?;
        let world = World { config: cfg, content_proj, speakers };

        let mut train = vec![];
        let mut test = vec![];
        for (line_no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let u: UtteranceIn = serde_json::from_str(line).map_err(|e| Error::format(line_no, e.to_string()))?;
            if u.speaker_id >= world.n_speakers() {
                return Err(Error::format(line_no, format!("field `speaker_id`: {} out of range", u.speaker_id)));
            }
            for (fi, f) in u.frames.iter().enumerate() {
                if f.x.len() != d || f.xbar0.len() != d || f.c.len() != k {
                    return Err(Error::format(line_no, format!("field `frames[{fi}]`: wrong vector length")));
                }
            }
            let utt = Utterance { speaker_id: u.speaker_id, frames: u.frames };
            match u.split.as_str() {
                "train" => train.push(utt),
                "test" => test.push(utt),
                other => return Err(Error::format(line_no, format!("field `split`: unknown value {other:?}"))),
            }
        }
        if train.len() != header.n_train || test.len() != header.n_test {
            return Err(Error::format(1, "fields `n_train`/`n_test` disagree with the utterance lines"));
        }
        Ok(Self { world, split: header.split, utterances_per_speaker: header.utterances_per_speaker, train, test })
    }

    pub fn all_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().chain(&self.test)
    }

    pub fn train_frames(&self) -> Result<FrameSet> {
        FrameSet::from_utterances(&self.train)
    }

    pub fn test_frames(&self) -> Result<FrameSet> {
        FrameSet::from_utterances(&self.test)
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset.to_jsonl())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_jsonl(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> WorldConfig {
        WorldConfig { n_speakers: 3, feature_dim: 5, content_dim: 2, frames_per_utterance: 3, seed: 11, ..Default::default() }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&small_cfg()).unwrap();
        let b = generate_world(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&WorldConfig { seed: 12, ..small_cfg() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn content_projection_has_unit_columns() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        for col in 0..4 {
            let n: f64 = (0..16).map(|r| w.content_proj.row(r)[col].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_offset_no_warp_renders_identically() {
        let w = generate_world(&WorldConfig { offset_scale: 0.0, warp_strength: 0.0, ..small_cfg() }).unwrap();
        let xbar = vec![0.3, -1.0, 2.0, 0.0, 1.5];
        let r0 = w.render(0, &xbar).unwrap();
        for s in 1..3 {
            assert_eq!(w.render(s, &xbar).unwrap(), r0);
        }
        assert_eq!(r0, xbar);
    }

    #[test]
    fn clean_frames_differ_by_offset() {
        let w = generate_world(&WorldConfig { obs_noise: 0.0, warp_strength: 0.0, ..small_cfg() }).unwrap();
        let u = synth_utterance(&w, 1, &mut seeded(3)).unwrap();
        for f in &u.frames {
            let diff: Vec<f64> = f.x.iter().zip(&f.xbar0).map(|(a, b)| a - b).collect();
            for (d, b) in diff.iter().zip(&w.speakers[1].offset) {
                assert!((d - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn utterances_share_speaker_not_content() {
        let w = generate_world(&small_cfg()).unwrap();
        let a = synth_utterance(&w, 2, &mut seeded(1)).unwrap();
        let b = synth_utterance(&w, 2, &mut seeded(2)).unwrap();
        assert_eq!(a.speaker_id, b.speaker_id);
        assert_ne!(a.frames[0].c, b.frames[0].c);
        assert!(synth_utterance(&w, 3, &mut seeded(1)).is_err());
    }

    #[test]
    fn average_is_speaker_independent() {
        let w = generate_world(&small_cfg()).unwrap();
        // identical rng state -> identical contents regardless of speaker
        let a = synth_utterance(&w, 0, &mut seeded(8)).unwrap();
        let b = synth_utterance(&w, 2, &mut seeded(8)).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.xbar0, fb.xbar0);
            assert_ne!(fa.x, fb.x);
        }
    }

    #[test]
    fn split_counts_and_disjointness() {
        let w = generate_world(&small_cfg()).unwrap();
        let ds = make_dataset(&w, 10, 0.8, &mut seeded(4)).unwrap();
        for s in 0..3 {
            assert_eq!(ds.train.iter().filter(|u| u.speaker_id == s).count(), 8);
            assert_eq!(ds.test.iter().filter(|u| u.speaker_id == s).count(), 2);
        }
        for u in &ds.test {
            assert!(!ds.train.contains(u));
        }
        assert!(make_dataset(&w, 10, 1.0, &mut seeded(4)).is_err());
    }

    #[test]
    fn file_round_trip_is_identity() {
        let w = generate_world(&small_cfg()).unwrap();
        let ds = make_dataset(&w, 4, 0.5, &mut seeded(4)).unwrap();
        let text = ds.to_jsonl();
        let back = Dataset::from_jsonl(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn malformed_file_names_line_and_field() {
        let w = generate_world(&small_cfg()).unwrap();
        let ds = make_dataset(&w, 2, 0.5, &mut seeded(4)).unwrap();
        let text = ds.to_jsonl();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replace("\"xbar0\"", "\"xbar\"");
        let err = Dataset::from_jsonl(&lines.join("\n")).unwrap_err();
        match err {
            Error::Format { line, detail } => {
                assert_eq!(line, 3);
                assert!(detail.contains("xbar"), "{detail}");
            }
            other => panic!("unexpected {other}"),
        }
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(Dataset::from_jsonl(&bumped), Err(Error::Format { line: 1, .. })));
    }
}
