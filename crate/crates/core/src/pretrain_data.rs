//! Proxy-task datasets built from VLN samples: masked language modelling
//! (MLM), instruction-trajectory matching (ITM) and next action prediction
//! (NAP).

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action_predictor::TurnLabel;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::seed::unit_rng;
use crate::template_engine::tokenize;
use crate::trajectory_builder::{FrameEntry, VlnSample};

pub const MASK_TOKEN: &str = "[MASK]";
pub const ITM_CANDIDATES: usize = 5;
pub const ITM_SHUFFLE_RETRIES: usize = 10;
pub const DEFAULT_SHARD_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub mask_prob: f64,
    /// Share of masked tokens replaced by [`MASK_TOKEN`].
    pub mask_token_share: f64,
    /// Share replaced by a random vocabulary token; the rest stay unchanged.
    pub random_token_share: f64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            mask_token_share: 0.8,
            random_token_share: 0.1,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::invalid(format!("mask_prob must be in (0, 1], got {}", self.mask_prob)));
        }
        let shares = [self.mask_token_share, self.random_token_share];
        if shares.iter().any(|s| !(0.0..=1.0).contains(s)) || shares.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::invalid("replacement shares must lie in [0, 1] and sum to at most 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmSample {
    pub sample_id: String,
    pub tokens: Vec<String>,
    pub masked_positions: Vec<usize>,
    /// Original tokens at `masked_positions`.
    pub targets: Vec<String>,
    pub frames: Vec<FrameEntry>,
}

impl MlmSample {
    /// Puts the targets back, recovering the original token sequence.
    pub fn unmasked(&self) -> Vec<String> {
        let mut tokens = self.tokens.clone();
        for (&pos, target) in self.masked_positions.iter().zip(&self.targets) {
            tokens[pos] = target.clone();
        }
        tokens
    }
}

/// Sorted distinct instruction tokens; the pool for random replacements.
pub fn vocabulary<'a>(samples: impl IntoIterator<Item = &'a VlnSample>) -> Vec<String> {
    samples
        .into_iter()
        .flat_map(|s| tokenize(&s.instruction))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Masks each instruction token independently with `mask_prob`, redrawing
/// until at least one token is masked.
pub fn build_mlm(sample: &VlnSample, cfg: &MlmConfig, vocab: &[String], rng: &mut impl Rng) -> Result<MlmSample> {
    cfg.validate()?;
    let original = tokenize(&sample.instruction);
    if original.is_empty() {
        return Err(Error::invalid(format!("sample {} has an empty instruction", sample.sample_id)));
    }
    let positions = loop {
        let chosen: Vec<usize> = (0..original.len()).filter(|_| rng.gen_bool(cfg.mask_prob)).collect();
        if !chosen.is_empty() {
            break chosen;
        }
    };
    let mut tokens = original.clone();
    for &pos in &positions {
        let u: f64 = rng.gen();
        if u < cfg.mask_token_share {
            tokens[pos] = MASK_TOKEN.to_string();
        } else if u < cfg.mask_token_share + cfg.random_token_share && !vocab.is_empty() {
            tokens[pos] = vocab[rng.gen_range(0..vocab.len())].clone();
        }
    }
    Ok(MlmSample {
        sample_id: sample.sample_id.clone(),
        tokens,
        targets: positions.iter().map(|&p| original[p].clone()).collect(),
        masked_positions: positions,
        frames: sample.frames.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Positive,
    InBatch,
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItmCandidate {
    pub kind: CandidateKind,
    /// Sample the frames were taken from.
    pub source_sample_id: String,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItmSample {
    pub sample_id: String,
    pub instruction: String,
    pub candidates: Vec<ItmCandidate>,
    pub positive_index: usize,
}

/// Why an ITM sample was not built.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItmSkip {
    TooShort,
    NoDistinctShuffle,
}

fn shuffled_order(frames: &[FrameEntry], rng: &mut impl Rng) -> Option<Vec<FrameEntry>> {
    for _ in 0..ITM_SHUFFLE_RETRIES {
        let mut candidate = frames.to_vec();
        candidate.shuffle(rng);
        if candidate.iter().map(|f| f.index).ne(frames.iter().map(|f| f.index)) {
            return Some(candidate);
        }
    }
    None
}

/// One positive, two trajectories of other pool samples and two shuffles of
/// the positive, in random order. `pool` may contain `sample` itself; it is
/// never used as an in-batch negative.
pub fn build_itm(
    sample: &VlnSample,
    pool: &[&VlnSample],
    rng: &mut impl Rng,
) -> Result<std::result::Result<ItmSample, ItmSkip>> {
    let others: Vec<&VlnSample> = pool
        .iter()
        .copied()
        .filter(|o| o.sample_id != sample.sample_id)
        .collect();
    if others.len() < 2 {
        return Err(Error::invalid(format!(
            "ITM for {} needs 2 other samples in the batch, found {}",
            sample.sample_id,
            others.len()
        )));
    }
    if sample.frames.len() < 2 {
        return Ok(Err(ItmSkip::TooShort));
    }
    let mut candidates = vec![ItmCandidate {
        kind: CandidateKind::Positive,
        source_sample_id: sample.sample_id.clone(),
        frames: sample.frames.clone(),
    }];
    for i in index::sample(rng, others.len(), 2) {
        candidates.push(ItmCandidate {
            kind: CandidateKind::InBatch,
            source_sample_id: others[i].sample_id.clone(),
            frames: others[i].frames.clone(),
        });
    }
    for _ in 0..2 {
        let Some(frames) = shuffled_order(&sample.frames, rng) else {
            return Ok(Err(ItmSkip::NoDistinctShuffle));
        };
        candidates.push(ItmCandidate {
            kind: CandidateKind::Shuffled,
            source_sample_id: sample.sample_id.clone(),
            frames,
        });
    }
    candidates.shuffle(rng);
    let positive_index = candidates
        .iter()
        .position(|c| c.kind == CandidateKind::Positive)
        .expect("positive candidate present");
    Ok(Ok(ItmSample {
        sample_id: sample.sample_id.clone(),
        instruction: sample.instruction.clone(),
        candidates,
        positive_index,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NapSample {
    pub sample_id: String,
    pub step: usize,
    pub instruction: String,
    /// Frames observed so far, up to and including the current one.
    pub history: Vec<FrameEntry>,
    pub next_action: TurnLabel,
}

/// One example per primitive action plus a final STOP step.
pub fn build_nap(sample: &VlnSample) -> Result<Vec<NapSample>> {
    if sample.actions.is_empty() {
        return Err(Error::invalid(format!("sample {} has no actions", sample.sample_id)));
    }
    if sample.frames.len() != sample.actions.len() + 1 {
        return Err(Error::invalid(format!(
            "sample {}: {} frames for {} actions",
            sample.sample_id,
            sample.frames.len(),
            sample.actions.len()
        )));
    }
    Ok(sample
        .actions
        .iter()
        .copied()
        .chain(std::iter::once(TurnLabel::Stop))
        .enumerate()
        .map(|(step, next_action)| NapSample {
            sample_id: sample.sample_id.clone(),
            step,
            instruction: sample.instruction.clone(),
            history: sample.frames[..=step].to_vec(),
            next_action,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub mlm: MlmConfig,
    /// Samples per batch of in-batch ITM negatives.
    pub shard_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mlm: MlmConfig::default(),
            shard_size: DEFAULT_SHARD_SIZE,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mlm.validate()?;
        if self.shard_size < 3 {
            return Err(Error::invalid(format!(
                "shard_size must be at least 3 for ITM negatives, got {}",
                self.shard_size
            )));
        }
        Ok(())
    }
}

/// Splits `n` items into consecutive shards of `size`; a trailing shard too
/// small to supply ITM negatives joins the one before it.
pub fn shard_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut ranges: Vec<_> = (0..n).step_by(size.max(1)).map(|s| s..(s + size).min(n)).collect();
    if ranges.len() > 1 && ranges.last().is_some_and(|r| r.len() < 3) {
        let last = ranges.pop().expect("non-empty");
        ranges.last_mut().expect("non-empty").end = last.end;
    }
    ranges
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub sample_id: String,
    pub task: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainManifest {
    pub seed: u64,
    pub shard_size: usize,
    pub shards: usize,
    pub samples_in: usize,
    pub mlm: usize,
    pub itm: usize,
    pub nap: usize,
    pub mlm_config: MlmConfig,
    pub skipped: Vec<Skipped>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutput {
    pub mlm: Vec<MlmSample>,
    pub itm: Vec<ItmSample>,
    pub nap: Vec<NapSample>,
    pub manifest: PretrainManifest,
}

#[derive(Default)]
struct ShardOutput {
    mlm: Vec<MlmSample>,
    itm: Vec<ItmSample>,
    nap: Vec<NapSample>,
    skipped: Vec<Skipped>,
}

fn skip(sample: &VlnSample, task: &str, reason: impl ToString) -> Skipped {
    Skipped {
        sample_id: sample.sample_id.clone(),
        task: task.to_string(),
        reason: reason.to_string(),
    }
}

fn build_shard(shard: &[VlnSample], cfg: &PretrainConfig, vocab: &[String], seed: u64) -> ShardOutput {
    let pool: Vec<&VlnSample> = shard.iter().collect();
    let mut out = ShardOutput::default();
    for sample in shard {
        let id = &sample.sample_id;
        match build_mlm(sample, &cfg.mlm, vocab, &mut unit_rng(seed, &format!("mlm/{id}"))) {
            Ok(m) => out.mlm.push(m),
            Err(e) => out.skipped.push(skip(sample, "mlm", e)),
        }
        match build_itm(sample, &pool, &mut unit_rng(seed, &format!("itm/{id}"))) {
            Ok(Ok(s)) => out.itm.push(s),
            Ok(Err(reason)) => out.skipped.push(skip(sample, "itm", format!("{reason:?}"))),
            Err(e) => out.skipped.push(skip(sample, "itm", e)),
        }
        match build_nap(sample) {
            Ok(n) => out.nap.extend(n),
            Err(e) => out.skipped.push(skip(sample, "nap", e)),
        }
    }
    out
}

/// Builds all three datasets. Each sample draws from its own seeded stream,
/// so shards may be processed in any order.
pub fn build_pretrain(samples: &[VlnSample], cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutput> {
    cfg.validate()?;
    let vocab = vocabulary(samples);
    let ranges = shard_ranges(samples.len(), cfg.shard_size);
    let shards: Vec<ShardOutput> = ranges
        .par_iter()
        .map(|r| build_shard(&samples[r.clone()], cfg, &vocab, seed))
        .collect();
    let mut out = ShardOutput::default();
    for s in shards {
        out.mlm.extend(s.mlm);
        out.itm.extend(s.itm);
        out.nap.extend(s.nap);
        out.skipped.extend(s.skipped);
    }
    for s in &out.skipped {
        log::warn!("{} sample {} skipped: {}", s.task, s.sample_id, s.reason);
    }
    Ok(PretrainOutput {
        manifest: PretrainManifest {
            seed,
            shard_size: cfg.shard_size,
            shards: ranges.len(),
            samples_in: samples.len(),
            mlm: out.mlm.len(),
            itm: out.itm.len(),
            nap: out.nap.len(),
            mlm_config: cfg.mlm.clone(),
            skipped: out.skipped,
        },
        mlm: out.mlm,
        itm: out.itm,
        nap: out.nap,
    })
}

/// Writes `mlm.jsonl`, `itm.jsonl`, `nap.jsonl` and `manifest.json`.
pub fn write_pretrain(dir: &Path, out: &PretrainOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    jsonl::write_records(&dir.join("mlm.jsonl"), &out.mlm)?;
    jsonl::write_records(&dir.join("itm.jsonl"), &out.itm)?;
    jsonl::write_records(&dir.join("nap.jsonl"), &out.nap)?;
    jsonl::write_json(&dir.join("manifest.json"), &out.manifest)
}
