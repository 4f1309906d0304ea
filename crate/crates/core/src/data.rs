//! Corpus ingestion and generation.
//!
//! A corpus directory holds, per split, line-aligned `<split>.ids`,
//! `<split>.text` and (optionally) `<split>.gloss` files plus one
//! `pose/<id>.pose3` file per sample and a `rig.cfg` sidecar describing the
//! skeleton. The synthetic toy generator produces such a directory from
//! nothing: every vocabulary token maps deterministically to a sinusoidal
//! motion primitive, sentences concatenate their tokens' primitives with a
//! linear cross-fade, and the gloss side is the reversed token order (or the
//! identity, for degenerate-corpus experiments).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::progressive::PoseSequence;
use crate::tensor::TensorError;

/// Errors surfaced by corpus IO and preprocessing.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: expected {expected} lines, found {found}")]
    LineCountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: {detail}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("sample {id}: missing pose file {path}")]
    MissingPoseFile { id: String, path: PathBuf },
    #[error("{path}: {detail}")]
    MalformedPose { path: PathBuf, detail: String },
    #[error("{path}: pose declares {found} joints, corpus uses {expected}")]
    JointMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {detail}")]
    MalformedRig { path: PathBuf, detail: String },
    #[error("mean shoulder distance {distance} is degenerate")]
    DegenerateSkeleton { distance: f64 },
    #[error("invalid corpus configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn read_file(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), DataError> {
    fs::write(path, contents).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Skeleton description: which joint is the root and which pair forms the
/// shoulders, for normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RigConfig {
    pub joints: usize,
    pub root: usize,
    pub shoulder_l: usize,
    pub shoulder_r: usize,
}

impl RigConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = [self.root, self.shoulder_l, self.shoulder_r]
            .into_iter()
            .find(|&j| j >= self.joints);
        if let Some(j) = bad {
            return Err(DataError::InvalidConfig(format!(
                "rig joint index {j} out of range for {} joints",
                self.joints
            )));
        }
        if self.shoulder_l == self.shoulder_r {
            return Err(DataError::InvalidConfig(
                "shoulder_l and shoulder_r must differ".into(),
            ));
        }
        Ok(())
    }

    /// Reads the `rig.cfg` sidecar (`J=`, `root=`, `shoulder_l=`,
    /// `shoulder_r=` keys).
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = read_file(path)?;
        let mut joints = None;
        let mut root = None;
        let mut shoulder_l = None;
        let mut shoulder_r = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| DataError::MalformedRig {
                path: path.to_path_buf(),
                detail: format!("line {}: expected key=value, got {line:?}", idx + 1),
            })?;
            let value: usize = value.trim().parse().map_err(|_| DataError::MalformedRig {
                path: path.to_path_buf(),
                detail: format!("line {}: {:?} is not a whole number", idx + 1, value.trim()),
            })?;
            match key.trim() {
                "J" => joints = Some(value),
                "root" => root = Some(value),
                "shoulder_l" => shoulder_l = Some(value),
                "shoulder_r" => shoulder_r = Some(value),
                other => {
                    return Err(DataError::MalformedRig {
                        path: path.to_path_buf(),
                        detail: format!("line {}: unknown key {other:?}", idx + 1),
                    })
                }
            }
        }
        let missing = |what: &str| DataError::MalformedRig {
            path: path.to_path_buf(),
            detail: format!("missing key {what:?}"),
        };
        let rig = RigConfig {
            joints: joints.ok_or_else(|| missing("J"))?,
            root: root.ok_or_else(|| missing("root"))?,
            shoulder_l: shoulder_l.ok_or_else(|| missing("shoulder_l"))?,
            shoulder_r: shoulder_r.ok_or_else(|| missing("shoulder_r"))?,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        self.validate()?;
        write_file(
            path,
            &format!(
                "J={}\nroot={}\nshoulder_l={}\nshoulder_r={}\n",
                self.joints, self.root, self.shoulder_l, self.shoulder_r
            ),
        )
    }
}

/// One corpus entry: an id, whitespace tokens for text (and optionally
/// gloss), and the pose sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelSample {
    pub id: String,
    pub text: Vec<String>,
    pub gloss: Option<Vec<String>>,
    pub pose: PoseSequence,
}

/// Serializes a pose sequence in the `pose3` text format: a header line
/// `POSE3 J=<joints> U=<frames>` followed by one line of `3*J` decimal
/// floats per frame. Counters are not stored; loading recomputes the
/// canonical schedule. Float formatting uses the shortest round-tripping
/// decimal form, so write→read is bitwise exact.
pub fn format_pose3(pose: &PoseSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "POSE3 J={} U={}", pose.joints(), pose.frames());
    for u in 0..pose.frames() {
        let frame = pose.frame(u);
        for (c, v) in frame.iter().enumerate() {
            if c > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses the `pose3` format produced by [`format_pose3`].
pub fn parse_pose3(path: &Path, contents: &str) -> Result<PoseSequence, DataError> {
    let malformed = |detail: String| DataError::MalformedPose {
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = contents.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("POSE3") {
        return Err(malformed(format!("bad magic in header {header:?}")));
    }
    let mut field = |prefix: &str| -> Result<usize, DataError> {
        let tok = parts
            .next()
            .ok_or_else(|| malformed(format!("header {header:?} is missing {prefix}<int>")))?;
        tok.strip_prefix(prefix)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| malformed(format!("header field {tok:?} is not {prefix}<int>")))
    };
    let joints = field("J=")?;
    let frames = field("U=")?;
    if joints == 0 || frames == 0 {
        return Err(malformed(format!("degenerate header J={joints} U={frames}")));
    }

    let channels = 3 * joints;
    let mut data = Vec::with_capacity(frames * channels);
    let mut count = 0usize;
    for (u, line) in lines.enumerate() {
        count += 1;
        if count > frames {
            return Err(malformed(format!("more than the declared {frames} frames")));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f32 = tok.parse().map_err(|_| {
                malformed(format!("frame {}: {tok:?} is not a decimal float", u + 1))
            })?;
            data.push(v);
        }
        let width = data.len() - before;
        if width != channels {
            return Err(malformed(format!(
                "frame {}: {width} values, expected {channels}",
                u + 1
            )));
        }
    }
    if count != frames {
        return Err(malformed(format!("{count} frames, header declared {frames}")));
    }
    PoseSequence::new(joints, data).map_err(DataError::from)
}

/// Writes `pose/<id>.pose3` under the corpus directory.
pub fn write_pose3(path: &Path, pose: &PoseSequence) -> Result<(), DataError> {
    write_file(path, &format_pose3(pose))
}

/// Reads one pose file.
pub fn read_pose3(path: &Path) -> Result<PoseSequence, DataError> {
    let contents = read_file(path)?;
    parse_pose3(path, &contents)
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>, DataError> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(DataError::MalformedLine {
                path: path.to_path_buf(),
                line: idx + 1,
                detail: "empty sequence".into(),
            });
        }
        out.push(tokens);
    }
    Ok(out)
}

/// Loads one split of a corpus directory: `<split>.ids` and `<split>.text`
/// are required and line-aligned, `<split>.gloss` joins in when present, and
/// every id must have a `pose/<id>.pose3` file with a consistent joint
/// count.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<ParallelSample>, DataError> {
    let ids_path = dir.join(format!("{split}.ids"));
    let text_path = dir.join(format!("{split}.text"));
    let gloss_path = dir.join(format!("{split}.gloss"));

    let ids_raw = read_file(&ids_path)?;
    let ids: Vec<String> = ids_raw.lines().map(str::to_string).collect();
    for (idx, id) in ids.iter().enumerate() {
        if id.trim().is_empty() || id.trim() != id {
            return Err(DataError::MalformedLine {
                path: ids_path.clone(),
                line: idx + 1,
                detail: format!("bad sample id {id:?}"),
            });
        }
    }
    let mut seen = HashSet::new();
    for (idx, id) in ids.iter().enumerate() {
        if !seen.insert(id.as_str()) {
            return Err(DataError::MalformedLine {
                path: ids_path.clone(),
                line: idx + 1,
                detail: format!("duplicate sample id {id:?}"),
            });
        }
    }

    let text = read_token_lines(&text_path)?;
    if text.len() != ids.len() {
        return Err(DataError::LineCountMismatch {
            path: text_path,
            expected: ids.len(),
            found: text.len(),
        });
    }
    let gloss = if gloss_path.exists() {
        let lines = read_token_lines(&gloss_path)?;
        if lines.len() != ids.len() {
            return Err(DataError::LineCountMismatch {
                path: gloss_path,
                expected: ids.len(),
                found: lines.len(),
            });
        }
        Some(lines)
    } else {
        None
    };

    let mut samples = Vec::with_capacity(ids.len());
    let mut joints: Option<usize> = None;
    for (idx, id) in ids.iter().enumerate() {
        let pose_path = dir.join("pose").join(format!("{id}.pose3"));
        if !pose_path.exists() {
            return Err(DataError::MissingPoseFile {
                id: id.clone(),
                path: pose_path,
            });
        }
        let pose = read_pose3(&pose_path)?;
        match joints {
            None => joints = Some(pose.joints()),
            Some(expected) if expected != pose.joints() => {
                return Err(DataError::JointMismatch {
                    path: pose_path,
                    expected,
                    found: pose.joints(),
                });
            }
            Some(_) => {}
        }
        samples.push(ParallelSample {
            id: id.clone(),
            text: text[idx].clone(),
            gloss: gloss.as_ref().map(|g| g[idx].clone()),
            pose,
        });
    }
    Ok(samples)
}

/// Demeaning offsets and scale recorded by [`normalize_skeleton`], enough to
/// invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizeInfo {
    /// Per-frame root position, `frames x 3`.
    pub root_offsets: Vec<f32>,
    /// Factor the centered coordinates were multiplied by.
    pub scale: f32,
}

/// Root-centers every frame and rescales so the mean shoulder-to-shoulder
/// distance over the sequence is 1. Returns the normalized sequence and the
/// information needed to invert the transform.
pub fn normalize_skeleton(
    pose: &PoseSequence,
    rig: &RigConfig,
) -> Result<(PoseSequence, NormalizeInfo), DataError> {
    rig.validate()?;
    if pose.joints() != rig.joints {
        return Err(DataError::InvalidConfig(format!(
            "pose has {} joints, rig declares {}",
            pose.joints(),
            rig.joints
        )));
    }
    let frames = pose.frames();
    let channels = pose.channels();

    let mut centered = Vec::with_capacity(frames * channels);
    let mut root_offsets = Vec::with_capacity(frames * 3);
    let mut shoulder_sum = 0.0f64;
    for u in 0..frames {
        let frame = pose.frame(u);
        let root = &frame[rig.root * 3..rig.root * 3 + 3];
        root_offsets.extend_from_slice(root);
        for j in 0..pose.joints() {
            for a in 0..3 {
                centered.push(frame[j * 3 + a] - root[a]);
            }
        }
        let l = &frame[rig.shoulder_l * 3..rig.shoulder_l * 3 + 3];
        let r = &frame[rig.shoulder_r * 3..rig.shoulder_r * 3 + 3];
        shoulder_sum += (0..3)
            .map(|a| {
                let d = l[a] as f64 - r[a] as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
    }
    let mean_shoulder = shoulder_sum / frames as f64;
    if mean_shoulder < 1e-9 {
        return Err(DataError::DegenerateSkeleton {
            distance: mean_shoulder,
        });
    }
    let scale = (1.0 / mean_shoulder) as f32;
    for v in &mut centered {
        *v *= scale;
    }
    let normalized = PoseSequence::with_counters(pose.joints(), centered, pose.counters().to_vec())?;
    Ok((normalized, NormalizeInfo { root_offsets, scale }))
}

/// Inverts [`normalize_skeleton`] given its recorded offsets and scale.
pub fn denormalize_skeleton(
    pose: &PoseSequence,
    info: &NormalizeInfo,
) -> Result<PoseSequence, DataError> {
    if info.root_offsets.len() != pose.frames() * 3 {
        return Err(DataError::InvalidConfig(format!(
            "{} root offsets for {} frames",
            info.root_offsets.len() / 3,
            pose.frames()
        )));
    }
    if info.scale == 0.0 {
        return Err(DataError::InvalidConfig("zero scale cannot be inverted".into()));
    }
    let mut data = Vec::with_capacity(pose.frames() * pose.channels());
    for u in 0..pose.frames() {
        let frame = pose.frame(u);
        let root = &info.root_offsets[u * 3..u * 3 + 3];
        for j in 0..pose.joints() {
            for a in 0..3 {
                data.push(frame[j * 3 + a] / info.scale + root[a]);
            }
        }
    }
    Ok(PoseSequence::with_counters(
        pose.joints(),
        data,
        pose.counters().to_vec(),
    )?)
}

/// Groups sample indices into batches of at most `batch_size`, bucketing
/// similar lengths together (stable order within equal lengths).
pub fn batchify(lengths: &[usize], batch_size: usize) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::InvalidConfig("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect())
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyCorpusConfig {
    /// Number of content tokens (reserved markers not included).
    pub vocab_size: usize,
    /// Training-split size; dev and test each get a tenth (at least 2).
    pub num_samples: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub joints: usize,
    pub seed: u64,
    /// Gloss equals the text instead of its reversal.
    pub identity_gloss: bool,
    /// Frames blended across token boundaries.
    pub crossfade: usize,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            vocab_size: 20,
            num_samples: 500,
            min_tokens: 2,
            max_tokens: 5,
            min_frames_per_token: 5,
            max_frames_per_token: 9,
            joints: 4,
            seed: 1,
            identity_gloss: false,
            crossfade: 2,
        }
    }
}

impl ToyCorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bail = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.vocab_size == 0 || self.num_samples == 0 {
            return bail("vocab_size and num_samples must be positive".into());
        }
        if self.min_tokens == 0 || self.max_tokens < self.min_tokens {
            return bail(format!(
                "token range [{}, {}] is invalid",
                self.min_tokens, self.max_tokens
            ));
        }
        if self.min_frames_per_token == 0 || self.max_frames_per_token < self.min_frames_per_token
        {
            return bail(format!(
                "frames-per-token range [{}, {}] is invalid",
                self.min_frames_per_token, self.max_frames_per_token
            ));
        }
        if self.min_frames_per_token <= self.crossfade {
            return bail(format!(
                "min_frames_per_token {} must exceed crossfade {}",
                self.min_frames_per_token, self.crossfade
            ));
        }
        if self.joints < 3 {
            return bail("toy rig needs at least 3 joints (root and two shoulders)".into());
        }
        Ok(())
    }

    /// Split sizes implied by `num_samples`: train, dev, test.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let held = (self.num_samples / 10).max(2);
        (self.num_samples, held, held)
    }
}

/// One token's motion primitive: a fixed duration and per-channel sinusoid
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MotionPrimitive {
    duration: usize,
    base: Vec<f32>,
    amplitude: Vec<f32>,
    frequency: Vec<f32>,
    phase: Vec<f32>,
}

impl MotionPrimitive {
    fn render(&self, channels: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.duration * channels);
        for t in 0..self.duration {
            for c in 0..channels {
                let angle = std::f64::consts::TAU * self.frequency[c] as f64 * t as f64
                    / self.duration as f64
                    + self.phase[c] as f64;
                out.push(self.base[c] + self.amplitude[c] * angle.sin() as f32);
            }
        }
        out
    }
}

pub(crate) fn draw_primitives(cfg: &ToyCorpusConfig, rng: &mut ChaCha8Rng) -> Vec<MotionPrimitive> {
    let channels = 3 * cfg.joints;
    (0..cfg.vocab_size)
        .map(|_| {
            let duration =
                rng.random_range(cfg.min_frames_per_token..=cfg.max_frames_per_token);
            let mut base = Vec::with_capacity(channels);
            let mut amplitude = Vec::with_capacity(channels);
            let mut frequency = Vec::with_capacity(channels);
            let mut phase = Vec::with_capacity(channels);
            for _ in 0..channels {
                base.push((rng.random::<f64>() * 2.0 - 1.0) as f32);
                amplitude.push((0.2 + 0.8 * rng.random::<f64>()) as f32);
                frequency.push((0.5 + 1.5 * rng.random::<f64>()) as f32);
                phase.push((std::f64::consts::TAU * rng.random::<f64>()) as f32);
            }
            MotionPrimitive {
                duration,
                base,
                amplitude,
                frequency,
                phase,
            }
        })
        .collect()
}

/// Concatenates primitives in order, linearly blending `crossfade` frames at
/// each boundary.
pub(crate) fn concat_with_crossfade(
    primitives: &[&MotionPrimitive],
    channels: usize,
    crossfade: usize,
) -> Vec<f32> {
    let mut out: Vec<f32> = Vec::new();
    for (k, prim) in primitives.iter().enumerate() {
        let rendered = prim.render(channels);
        if k == 0 {
            out.extend_from_slice(&rendered);
            continue;
        }
        let overlap = crossfade.min(prim.duration).min(out.len() / channels);
        let tail_start = out.len() - overlap * channels;
        for j in 0..overlap {
            let w = (j + 1) as f32 / (overlap + 1) as f32;
            for c in 0..channels {
                let old = out[tail_start + j * channels + c];
                let new = rendered[j * channels + c];
                out[tail_start + j * channels + c] = (1.0 - w) * old + w * new;
            }
        }
        out.extend_from_slice(&rendered[overlap * channels..]);
    }
    out
}

fn token_name(index: usize, width: usize) -> String {
    format!("w{index:0width$}")
}

/// Generates a toy corpus under `out_dir`: `train`/`dev`/`test` splits with
/// pairwise-distinct sentences, pose files following the gloss-side token
/// order, and a `rig.cfg` (root 0, shoulders 1 and 2). Byte-deterministic
/// for a fixed config.
pub fn synth_toy_corpus(cfg: &ToyCorpusConfig, out_dir: &Path) -> Result<(), DataError> {
    cfg.validate()?;
    let (n_train, n_dev, n_test) = cfg.split_sizes();
    let total = n_train + n_dev + n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let width = 2.max(if cfg.vocab_size > 1 {
        (cfg.vocab_size - 1).to_string().len()
    } else {
        1
    });
    let primitives = draw_primitives(cfg, &mut rng);

    let mut sentences: Vec<Vec<usize>> = Vec::with_capacity(total);
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
    let mut attempts = 0usize;
    while sentences.len() < total {
        attempts += 1;
        if attempts > 1000 * total {
            return Err(DataError::InvalidConfig(format!(
                "cannot draw {total} distinct sentences from vocab {} with {}..={} tokens",
                cfg.vocab_size, cfg.min_tokens, cfg.max_tokens
            )));
        }
        let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let sent: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        if seen.insert(sent.clone()) {
            sentences.push(sent);
        }
    }

    let pose_dir = out_dir.join("pose");
    fs::create_dir_all(&pose_dir).map_err(|source| DataError::Io {
        path: pose_dir.clone(),
        source,
    })?;

    let channels = 3 * cfg.joints;
    let mut offset = 0usize;
    for (split, count) in [("train", n_train), ("dev", n_dev), ("test", n_test)] {
        let mut ids = String::new();
        let mut text = String::new();
        let mut gloss = String::new();
        for k in 0..count {
            let sent = &sentences[offset + k];
            let id = format!("{split}_{k:04}");
            let text_tokens: Vec<String> =
                sent.iter().map(|&i| token_name(i, width)).collect();
            let gloss_indices: Vec<usize> = if cfg.identity_gloss {
                sent.clone()
            } else {
                sent.iter().rev().copied().collect()
            };
            let gloss_tokens: Vec<String> =
                gloss_indices.iter().map(|&i| token_name(i, width)).collect();

            let prims: Vec<&MotionPrimitive> =
                gloss_indices.iter().map(|&i| &primitives[i]).collect();
            let data = concat_with_crossfade(&prims, channels, cfg.crossfade);
            let pose = PoseSequence::new(cfg.joints, data)?;
            write_pose3(&pose_dir.join(format!("{id}.pose3")), &pose)?;

            ids.push_str(&id);
            ids.push('\n');
            text.push_str(&text_tokens.join(" "));
            text.push('\n');
            gloss.push_str(&gloss_tokens.join(" "));
            gloss.push('\n');
        }
        write_file(&out_dir.join(format!("{split}.ids")), &ids)?;
        write_file(&out_dir.join(format!("{split}.text")), &text)?;
        write_file(&out_dir.join(format!("{split}.gloss")), &gloss)?;
        offset += count;
    }

    RigConfig {
        joints: cfg.joints,
        root: 0,
        shoulder_l: 1,
        shoulder_r: 2,
    }
    .save(&out_dir.join("rig.cfg"))?;
    Ok(())
}
