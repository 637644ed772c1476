//! Synthetic text-to-speech surrogate: short text sequences expand into long
//! speech-token sequences through fixed per-symbol templates.
//!
//! Each text symbol owns a template of `expansion_min..=expansion_max` slots.
//! Every slot has two token variants and the previous emitted token's parity
//! picks between them, so a wrong token changes what should follow it. Noise
//! nudges an emitted token to a neighbouring index; the following token then
//! conditions on the perturbed value.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{SequenceExample, EOS, SOS};
use crate::par;

/// First speech index usable for content tokens (after SOS and EOS).
pub const FIRST_CONTENT: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub text_vocab: usize,
    pub speech_vocab: usize,
    pub expansion_min: usize,
    pub expansion_max: usize,
    pub noise_prob: f64,
    /// Text length band of the training split.
    pub text_len: (usize, usize),
    /// Text length band of the short evaluation split. The long-form split
    /// multiplies both ends by `long_form_factor`.
    pub eval_text_len: (usize, usize),
    pub long_form_factor: usize,
    /// Allowed target lengths, EOS included.
    pub target_len_range: (usize, usize),
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            text_vocab: 16,
            speech_vocab: 64,
            expansion_min: 2,
            expansion_max: 6,
            noise_prob: 0.02,
            text_len: (2, 20),
            eval_text_len: (2, 5),
            long_form_factor: 4,
            target_len_range: (2, 128),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    LongForm,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::LongForm => "long_form",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Eval => 0x6576_616c_0000_0002,
            Split::LongForm => 0x6c6f_6e67_0000_0003,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            "long_form" | "long-form" | "long" => Ok(Split::LongForm),
            other => Err(format!("unknown split {other:?} (train, eval, long_form)")),
        }
    }
}

/// One symbol's expansion: `slots[j][parity]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub slots: Vec<[u32; 2]>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.expansion_min == 0 {
            return Err(Error::config("task.expansion_min", "must be at least 1"));
        }
        if self.expansion_max < self.expansion_min {
            return Err(Error::config("task.expansion_max", "must be at least expansion_min"));
        }
        if self.speech_vocab < 4 {
            return Err(Error::config("task.speech_vocab", "needs SOS, EOS and two content tokens"));
        }
        if self.text_vocab == 0 {
            return Err(Error::config("task.text_vocab", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::config("task.noise_prob", "must lie in [0, 1]"));
        }
        for (field, (lo, hi)) in [("task.text_len", self.text_len), ("task.eval_text_len", self.eval_text_len)] {
            if lo == 0 || hi < lo {
                return Err(Error::config(field, format!("bad band ({lo}, {hi})")));
            }
        }
        if self.long_form_factor == 0 {
            return Err(Error::config("task.long_form_factor", "must be at least 1"));
        }
        let (lo, hi) = self.target_len_range;
        if lo < 1 || hi < lo {
            return Err(Error::config("task.target_len_range", format!("bad band ({lo}, {hi})")));
        }
        Ok(())
    }

    pub fn text_len_band(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => self.text_len,
            Split::Eval => self.eval_text_len,
            Split::LongForm => (
                self.eval_text_len.0 * self.long_form_factor,
                self.eval_text_len.1 * self.long_form_factor,
            ),
        }
    }

    /// Longest target any split can produce, EOS included.
    pub fn max_target_len(&self) -> usize {
        let longest = [Split::Train, Split::Eval, Split::LongForm]
            .iter()
            .map(|&s| self.text_len_band(s).1)
            .max()
            .unwrap_or(0);
        longest * self.expansion_max + 1
    }

    fn content_tokens(&self) -> u32 {
        self.speech_vocab as u32 - FIRST_CONTENT
    }

    /// The fixed template of `symbol`, a pure function of `(seed, symbol)`.
    pub fn template(&self, symbol: u32) -> Template {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0x7465_6d70, symbol as u64));
        let len = rng.gen_range(self.expansion_min..=self.expansion_max);
        let n = self.content_tokens();
        let slots = (0..len)
            .map(|_| [FIRST_CONTENT + rng.gen_range(0..n), FIRST_CONTENT + rng.gen_range(0..n)])
            .collect();
        Template { slots }
    }

    pub fn templates(&self) -> Vec<Template> {
        (0..self.text_vocab as u32).map(|s| self.template(s)).collect()
    }

    /// Short hex digest of the spec's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("task specs always serialize");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// Expands a text sequence with noise drawn from `rng`.
    pub fn expand(&self, text: &[u32], templates: &[Template], rng: &mut impl Rng) -> Vec<u32> {
        let n = self.content_tokens();
        let mut out = Vec::new();
        let mut prev = SOS;
        for &sym in text {
            for slot in &templates[sym as usize].slots {
                let mut tok = slot[(prev % 2) as usize];
                if self.noise_prob > 0.0 && rng.gen_bool(self.noise_prob) {
                    let off = tok - FIRST_CONTENT;
                    let shifted = if rng.gen_bool(0.5) { off + 1 } else { off + n - 1 };
                    tok = FIRST_CONTENT + shifted % n;
                }
                out.push(tok);
                prev = tok;
            }
        }
        out.push(EOS);
        out
    }
}

/// Example `index` of `split`, fully determined by `(spec, split, index)`.
pub fn generate_split_example(spec: &TaskSpec, split: Split, index: u64) -> Result<SequenceExample> {
    generate_with(spec, split, index, &spec.templates())
}

/// Example `index` of the training split.
pub fn generate_example(spec: &TaskSpec, index: u64) -> Result<SequenceExample> {
    generate_split_example(spec, Split::Train, index)
}

fn generate_with(spec: &TaskSpec, split: Split, index: u64, templates: &[Template]) -> Result<SequenceExample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, split.salt(), index));
    let (lo, hi) = spec.text_len_band(split);
    let len = rng.gen_range(lo..=hi);
    let text: Vec<u32> = (0..len).map(|_| rng.gen_range(0..spec.text_vocab as u32)).collect();
    let target = spec.expand(&text, templates, &mut rng);
    let (tmin, tmax) = spec.target_len_range;
    if target.len() < tmin || target.len() > tmax {
        return Err(Error::config(
            "task.target_len_range",
            format!(
                "{} example {index} has target length {} outside ({tmin}, {tmax})",
                split.name(),
                target.len()
            ),
        ));
    }
    Ok(SequenceExample::new(text, target))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub split: Split,
    pub examples: Vec<SequenceExample>,
}

impl Dataset {
    /// Examples `0..n` of `split`, generated in parallel.
    pub fn generate(spec: &TaskSpec, split: Split, n: usize) -> Result<Dataset> {
        spec.validate()?;
        let templates = spec.templates();
        let examples = par::map_range(n, |i| generate_with(spec, split, i as u64, &templates))
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(Dataset {
            spec: spec.clone(),
            split,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Writes one JSON record per example.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let hash = self.spec.hash();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for ex in &self.examples {
            let rec = DumpRecord {
                prompt: ex.prompt.clone(),
                target: ex.target.clone(),
                spec_hash: hash.clone(),
            };
            let line = serde_json::to_string(&rec).expect("records always serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a dump written for `spec`; any record carrying another spec's
    /// hash is rejected.
    pub fn load(path: &Path, spec: &TaskSpec, split: Split) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let want = spec.hash();
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: DumpRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if rec.spec_hash != want {
                return Err(Error::Artifact {
                    path: path.to_path_buf(),
                    reason: format!("line {}: spec hash {} does not match {want}", i + 1, rec.spec_hash),
                });
            }
            examples.push(SequenceExample::new(rec.prompt, rec.target));
        }
        Ok(Dataset {
            spec: spec.clone(),
            split,
            examples,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpRecord {
    prompt: Vec<u32>,
    target: Vec<u32>,
    spec_hash: String,
}

/// Tokens before the first EOS.
pub fn strip_eos(tokens: &[u32]) -> &[u32] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

/// Levenshtein distance, two-row dynamic program.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between the EOS-stripped sequences, normalized by the
/// longer of the two so the rate stays in `[0, 1]`.
pub fn token_error_rate(pred: &[u32], gt: &[u32]) -> f64 {
    let (p, g) = (strip_eos(pred), strip_eos(gt));
    let denom = p.len().max(g.len());
    if denom == 0 {
        return 0.0;
    }
    edit_distance(p, g) as f64 / denom as f64
}

/// Decoded length over reference length, both cut at EOS.
pub fn length_ratio(pred: &[u32], gt: &[u32]) -> f64 {
    let g = strip_eos(gt).len();
    if g == 0 {
        return if strip_eos(pred).is_empty() { 1.0 } else { f64::INFINITY };
    }
    strip_eos(pred).len() as f64 / g as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_expansion_is_a_fixed_mapping() {
        let spec = TaskSpec {
            expansion_min: 1,
            expansion_max: 1,
            noise_prob: 0.0,
            ..TaskSpec::default()
        };
        let t = spec.templates();
        for i in 0..50 {
            let ex = generate_example(&spec, i).unwrap();
            assert_eq!(ex.t(), ex.prompt.len() + 1);
            assert_eq!(*ex.target.last().unwrap(), EOS);
            let mut prev = SOS;
            for (s, y) in ex.prompt.iter().zip(&ex.target) {
                assert_eq!(*y, t[*s as usize].slots[0][(prev % 2) as usize]);
                prev = *y;
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_split_dependent() {
        let spec = TaskSpec::default();
        assert_eq!(generate_example(&spec, 9).unwrap(), generate_example(&spec, 9).unwrap());
        let a = generate_split_example(&spec, Split::Eval, 3).unwrap();
        let b = generate_split_example(&spec, Split::LongForm, 3).unwrap();
        assert!(b.prompt.len() >= 4 * spec.eval_text_len.0);
        assert_ne!(a, b);
        let d = Dataset::generate(&spec, Split::Eval, 20).unwrap();
        assert_eq!(d.examples[3], a);
    }

    #[test]
    fn too_long_targets_are_rejected() {
        let spec = TaskSpec {
            target_len_range: (2, 10),
            ..TaskSpec::default()
        };
        let err = (0..20).find_map(|i| generate_split_example(&spec, Split::LongForm, i).err());
        assert!(matches!(err, Some(Error::Config { .. })));
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(token_error_rate(&[4, 5, EOS], &[4, 5, EOS]), 0.0);
        assert_eq!(token_error_rate(&[], &[3, 4, 5, 6, EOS]), 1.0);
        assert!((token_error_rate(&[2, 3, 4], &[2, 9, 4]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_error_rate(&[EOS], &[EOS]), 0.0);
    }

    #[test]
    fn length_ratio_examples() {
        assert_eq!(length_ratio(&[2, 3, EOS], &[4, 4, EOS]), 1.0);
        assert_eq!(length_ratio(&[2, 3, EOS, 7], &[4, 4, 4, 4, EOS]), 0.5);
        let gt: Vec<u32> = std::iter::repeat(3).take(100).chain([EOS]).collect();
        assert_eq!(length_ratio(&vec![5; 400], &gt), 4.0);
    }

    #[test]
    fn spec_hash_tracks_fields() {
        let a = TaskSpec::default();
        let b = TaskSpec { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
