//! Instruction templates: extraction from an annotated corpus, language-model
//! filtering, sampling and slot filling.
//!
//! A template is a corpus sentence whose noun phrases are replaced by a single
//! `<OBJECT>` slot. Sentences with more than one noun phrase, with no
//! direction keyword, or with more than one distinct direction keyword are
//! discarded. The surviving templates are grouped by the keyword they contain
//! and each group is cut to its lowest-loss fraction under a pluggable
//! sentence scorer.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OBJECT_SLOT: &str = "<OBJECT>";

/// Objects used to instantiate templates before scoring.
pub const DEFAULT_PROBE_OBJECTS: [&str; 4] = ["signboard", "traffic light", "awning", "telephone pole"];

/// Template counts reported for the full human-written corpus, used only as
/// a provenance comparison.
pub const REFERENCE_COUNTS: [(&str, usize); 3] = [("turn", 3004), ("forward", 269), ("stop", 92)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    TurnLeft,
    TurnRight,
    Forward,
    Stop,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::TurnLeft,
        Category::TurnRight,
        Category::Forward,
        Category::Stop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::TurnLeft => "TURN_LEFT",
            Category::TurnRight => "TURN_RIGHT",
            Category::Forward => "FORWARD",
            Category::Stop => "STOP",
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            Category::TurnLeft => "left",
            Category::TurnRight => "right",
            Category::Forward => "forward",
            Category::Stop => "stop",
        }
    }

    fn from_keyword(token: &str) -> Option<Self> {
        Category::ALL
            .into_iter()
            .find(|c| token.eq_ignore_ascii_case(c.keyword()))
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

const SENTENCE_END: [&str; 3] = [".", "!", "?"];
const ARTICLES: [&str; 3] = ["the", "a", "an"];

/// Splits on whitespace and detaches `. , ! ? ; :` as their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if matches!(ch, '.' | ',' | '!' | '?' | ';' | ':') {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Splits a token sequence after every sentence-final punctuation token.
pub fn split_sentences(tokens: &[String]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for t in tokens {
        current.push(t.clone());
        if SENTENCE_END.contains(&t.as_str()) {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Instruction corpus line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    /// `<record id>#<sentence index>`
    pub id: String,
    pub tokens: Vec<String>,
}

pub fn corpus_sentences(records: &[CorpusRecord]) -> Vec<Sentence> {
    records
        .iter()
        .flat_map(|r| {
            split_sentences(&tokenize(&r.text))
                .into_iter()
                .enumerate()
                .map(move |(k, tokens)| Sentence {
                    id: format!("{}#{k}", r.id),
                    tokens,
                })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SpanKind {
    NounPhrase,
    DirectionWord,
}

/// Token span `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

/// Chunker output for one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkAnnotation {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub spans: Vec<Span>,
}

impl ChunkAnnotation {
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0;
        for (i, s) in self.spans.iter().enumerate() {
            if s.start >= s.end || s.end > self.tokens.len() {
                return Err(Error::invalid(format!(
                    "{}: span [{}, {}) outside {} tokens",
                    self.sentence_id,
                    s.start,
                    s.end,
                    self.tokens.len()
                )));
            }
            if i > 0 && s.start < prev_end {
                return Err(Error::invalid(format!(
                    "{}: spans overlap or are unsorted at [{}, {})",
                    self.sentence_id, s.start, s.end
                )));
            }
            prev_end = s.end;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    /// Space-separated tokens, possibly containing one [`OBJECT_SLOT`].
    pub text: String,
    pub category: Category,
    pub source_sentence_id: String,
}

impl Template {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.text.split(' ').filter(|t| !t.is_empty())
    }

    pub fn slot_count(&self) -> usize {
        self.tokens().filter(|t| *t == OBJECT_SLOT).count()
    }

    pub fn has_slot(&self) -> bool {
        self.slot_count() > 0
    }

    /// Slot count, keyword and category agree.
    pub fn is_well_formed(&self) -> bool {
        let tokens: Vec<&str> = self.tokens().collect();
        self.slot_count() <= 1
            && tokens.iter().any(|t| *t != OBJECT_SLOT)
            && categorize(&tokens) == Some(self.category)
    }
}

/// Distinct direction keywords present in `tokens`.
pub fn direction_keywords<S: AsRef<str>>(tokens: &[S]) -> BTreeSet<Category> {
    tokens
        .iter()
        .filter_map(|t| Category::from_keyword(t.as_ref()))
        .collect()
}

/// Category of a template: defined only when exactly one distinct keyword
/// out of left / right / forward / stop appears.
pub fn categorize<S: AsRef<str>>(tokens: &[S]) -> Option<Category> {
    let keywords = direction_keywords(tokens);
    match keywords.len() {
        1 => keywords.into_iter().next(),
        _ => None,
    }
}

/// Why a sentence produced no template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    MultipleObjects,
    MultipleDirections,
    NoDirection,
}

/// Masks every noun phrase and either builds the template or reports which
/// filter discarded it.
pub fn extract_candidate(
    sentence: &[String],
    annotation: &ChunkAnnotation,
) -> Result<std::result::Result<Template, Rejection>> {
    if annotation.tokens != sentence {
        return Err(Error::invalid(format!(
            "annotation {} does not match its sentence tokens",
            annotation.sentence_id
        )));
    }
    annotation.validate()?;
    let mut masked: Vec<String> = Vec::with_capacity(sentence.len());
    let mut cursor = 0;
    for span in annotation.spans.iter().filter(|s| s.kind == SpanKind::NounPhrase) {
        masked.extend_from_slice(&sentence[cursor..span.start]);
        // "the intersection" -> "the <OBJECT>": a leading article stays so
        // bare class names can be filled in
        let head = &sentence[span.start];
        if span.end - span.start > 1 && ARTICLES.iter().any(|a| head.eq_ignore_ascii_case(a)) {
            masked.push(head.clone());
        }
        masked.push(OBJECT_SLOT.to_string());
        cursor = span.end;
    }
    masked.extend_from_slice(&sentence[cursor..]);

    if masked.iter().filter(|t| *t == OBJECT_SLOT).count() >= 2 {
        return Ok(Err(Rejection::MultipleObjects));
    }
    let keywords = direction_keywords(&masked);
    let category = match keywords.len() {
        0 => return Ok(Err(Rejection::NoDirection)),
        1 => keywords.into_iter().next().expect("one keyword"),
        _ => return Ok(Err(Rejection::MultipleDirections)),
    };
    Ok(Ok(Template {
        id: annotation.sentence_id.clone(),
        text: masked.join(" "),
        category,
        source_sentence_id: annotation.sentence_id.clone(),
    }))
}

/// Zero or one template for a sentence.
pub fn sentence_to_templates(
    sentence: &[String],
    annotation: &ChunkAnnotation,
) -> Result<Option<Template>> {
    Ok(extract_candidate(sentence, annotation)?.ok())
}

/// Candidates of a whole corpus plus bookkeeping.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Extraction {
    pub candidates: Vec<Template>,
    pub sentences: usize,
    pub missing_annotations: usize,
    pub rejected: BTreeMap<Rejection, usize>,
}

/// Runs [`extract_candidate`] over every corpus sentence in corpus order.
/// Sentences without an annotation are skipped with a warning; a malformed
/// annotation is an error.
pub fn extract_templates(
    corpus: &[CorpusRecord],
    annotations: &[ChunkAnnotation],
) -> Result<Extraction> {
    let by_id: HashMap<&str, &ChunkAnnotation> = annotations
        .iter()
        .map(|a| (a.sentence_id.as_str(), a))
        .collect();
    let mut out = Extraction::default();
    for sentence in corpus_sentences(corpus) {
        out.sentences += 1;
        let Some(annotation) = by_id.get(sentence.id.as_str()) else {
            log::warn!("no annotation for sentence {}", sentence.id);
            out.missing_annotations += 1;
            continue;
        };
        match extract_candidate(&sentence.tokens, annotation)? {
            Ok(t) => out.candidates.push(t),
            Err(r) => *out.rejected.entry(r).or_default() += 1,
        }
    }
    Ok(out)
}

/// Replaces the slot with `object_name` verbatim.
pub fn fill_template(template: &Template, object_name: Option<&str>) -> Result<String> {
    if !template.has_slot() {
        return Ok(template.tokens().collect::<Vec<_>>().join(" "));
    }
    let object = object_name.ok_or_else(|| {
        Error::invalid(format!("template {} needs an object to fill its slot", template.id))
    })?;
    Ok(template
        .tokens()
        .map(|t| if t == OBJECT_SLOT { object } else { t })
        .collect::<Vec<_>>()
        .join(" "))
}

/// Returns the language-model loss of one probe sentence.
pub trait SentenceScorer {
    fn score(&mut self, template_id: &str, probe: &str, sentence: &str) -> Result<f64>;

    fn describe(&self) -> String {
        "custom".to_string()
    }
}

impl<F> SentenceScorer for F
where
    F: FnMut(&str, &str, &str) -> Result<f64>,
{
    fn score(&mut self, template_id: &str, probe: &str, sentence: &str) -> Result<f64> {
        self(template_id, probe, sentence)
    }
}

/// One line of a precomputed score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub template_id: String,
    pub probe: String,
    pub loss: f64,
}

/// Scores looked up from a JSONL file keyed by `(template_id, probe)`.
pub struct ScoreFile {
    losses: HashMap<(String, String), f64>,
    source: String,
}

impl ScoreFile {
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<ScoreRecord> = crate::jsonl::read_records(path)?;
        Ok(Self::from_records(records, path.display().to_string()))
    }

    pub fn from_records(records: Vec<ScoreRecord>, source: String) -> Self {
        Self {
            losses: records
                .into_iter()
                .map(|r| ((r.template_id, r.probe), r.loss))
                .collect(),
            source,
        }
    }
}

impl SentenceScorer for ScoreFile {
    fn score(&mut self, template_id: &str, probe: &str, _sentence: &str) -> Result<f64> {
        self.losses
            .get(&(template_id.to_string(), probe.to_string()))
            .copied()
            .ok_or_else(|| Error::Scorer(format!("no score for ({template_id}, {probe})")))
    }

    fn describe(&self) -> String {
        format!("score-file:{}", self.source)
    }
}

/// Line protocol: one sentence per line on stdin, one decimal loss per line
/// on stdout. A `NaN` reply marks a failed probe.
pub struct SubprocessScorer {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    command: String,
    cache: HashMap<String, f64>,
}

impl SubprocessScorer {
    /// `command` is split on whitespace into program and arguments.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::invalid("empty scorer command"))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::io(program, e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdin,
            stdout,
            command: command.to_string(),
            cache: HashMap::new(),
        })
    }
}

impl SentenceScorer for SubprocessScorer {
    fn score(&mut self, _template_id: &str, _probe: &str, sentence: &str) -> Result<f64> {
        if let Some(&loss) = self.cache.get(sentence) {
            return Ok(loss);
        }
        let line = sentence.replace('\n', " ");
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::Scorer(format!("{}: {e}", self.command)))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Scorer(format!("{}: {e}", self.command)))?;
        if n == 0 {
            return Err(Error::Scorer(format!("{} closed its output", self.command)));
        }
        let loss: f64 = reply
            .trim()
            .parse()
            .map_err(|_| Error::Scorer(format!("unparseable loss {:?}", reply.trim())))?;
        if !loss.is_finite() {
            return Err(Error::Scorer(format!("non-finite loss for {sentence:?}")));
        }
        self.cache.insert(sentence.to_string(), loss);
        Ok(loss)
    }

    fn describe(&self) -> String {
        format!("subprocess:{}", self.command)
    }
}

impl Drop for SubprocessScorer {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmFilterConfig {
    pub probe_objects: Vec<String>,
    pub keep_fraction: f64,
}

impl Default for LmFilterConfig {
    fn default() -> Self {
        Self {
            probe_objects: DEFAULT_PROBE_OBJECTS.iter().map(|s| s.to_string()).collect(),
            keep_fraction: 0.5,
        }
    }
}

impl LmFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "keep_fraction must be in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        if self.probe_objects.is_empty() {
            return Err(Error::invalid("at least one probe object is required"));
        }
        Ok(())
    }
}

/// How many of `n` templates survive a cut at `keep_fraction`.
pub fn retained_count(n: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTemplate {
    #[serde(flatten)]
    pub template: Template,
    pub lm_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BankMetadata {
    pub corpus_id: String,
    pub scorer: String,
    pub keep_fraction: f64,
    pub probe_objects: Vec<String>,
    /// Distinct candidates per category before the loss cut.
    pub candidates: BTreeMap<Category, usize>,
    /// Templates whose scoring failed.
    pub dropped: Vec<String>,
}

/// Filtered templates by category, each list in corpus order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub metadata: BankMetadata,
    pub templates: BTreeMap<Category, Vec<ScoredTemplate>>,
}

impl TemplateBank {
    pub fn load(path: &Path) -> Result<Self> {
        let bank: TemplateBank = crate::jsonl::read_json(path)?;
        bank.validate()?;
        Ok(bank)
    }

    /// Builds an unfiltered bank (loss 0) from templates, e.g. for fixtures.
    pub fn from_templates(templates: impl IntoIterator<Item = Template>) -> Result<Self> {
        let mut bank = TemplateBank::default();
        for t in templates {
            bank.templates.entry(t.category).or_default().push(ScoredTemplate {
                template: t,
                lm_loss: 0.0,
            });
        }
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        for (category, list) in &self.templates {
            let mut seen = HashSet::new();
            for st in list {
                let t = &st.template;
                if t.category != *category || !t.is_well_formed() {
                    return Err(Error::invalid(format!(
                        "template {} ({:?}) is not a well-formed {category} template",
                        t.id, t.text
                    )));
                }
                if !(st.lm_loss.is_finite() && st.lm_loss >= 0.0) {
                    return Err(Error::invalid(format!("template {} has loss {}", t.id, st.lm_loss)));
                }
                if !seen.insert(t.text.as_str()) {
                    return Err(Error::invalid(format!("duplicate template text {:?}", t.text)));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, category: Category) -> &[ScoredTemplate] {
        self.templates.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn count(&self, category: Category) -> usize {
        self.get(category).len()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

/// Scores every candidate with each probe object and keeps the
/// lowest-loss `keep_fraction` of each category, ties in corpus order.
///
/// Duplicate texts within a category keep their first occurrence. A template
/// whose scoring fails on any probe is dropped with a warning.
pub fn lm_filter(
    candidates: &[Template],
    scorer: &mut dyn SentenceScorer,
    config: &LmFilterConfig,
) -> Result<TemplateBank> {
    config.validate()?;
    let mut seen: HashSet<(Category, &str)> = HashSet::new();
    let mut per_category: BTreeMap<Category, Vec<ScoredTemplate>> = BTreeMap::new();
    let mut metadata = BankMetadata {
        scorer: scorer.describe(),
        keep_fraction: config.keep_fraction,
        probe_objects: config.probe_objects.clone(),
        ..Default::default()
    };
    for t in candidates {
        if !seen.insert((t.category, t.text.as_str())) {
            continue;
        }
        *metadata.candidates.entry(t.category).or_default() += 1;
        match mean_probe_loss(t, scorer, &config.probe_objects) {
            Ok(lm_loss) => per_category.entry(t.category).or_default().push(ScoredTemplate {
                template: t.clone(),
                lm_loss,
            }),
            Err(e) => {
                log::warn!("dropping template {}: {e}", t.id);
                metadata.dropped.push(t.id.clone());
            }
        }
    }
    let templates = per_category
        .into_iter()
        .map(|(category, scored)| {
            let keep = retained_count(scored.len(), config.keep_fraction);
            let mut order: Vec<usize> = (0..scored.len()).collect();
            // stable: equal losses keep corpus order
            order.sort_by(|&a, &b| scored[a].lm_loss.total_cmp(&scored[b].lm_loss));
            let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
            kept.sort_unstable();
            let list = kept.into_iter().map(|i| scored[i].clone()).collect();
            (category, list)
        })
        .collect();
    Ok(TemplateBank {
        metadata,
        templates,
    })
}

fn mean_probe_loss(
    template: &Template,
    scorer: &mut dyn SentenceScorer,
    probes: &[String],
) -> Result<f64> {
    let mut total = 0.0;
    for probe in probes {
        let sentence = fill_template(template, Some(probe))?;
        let loss = scorer.score(&template.id, probe, &sentence)?;
        if !(loss.is_finite() && loss >= 0.0) {
            return Err(Error::Scorer(format!("loss {loss} for probe {probe:?}")));
        }
        total += loss;
    }
    Ok(total / probes.len() as f64)
}

/// Observed vs reference template counts for one group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceComparison {
    pub group: &'static str,
    pub observed: usize,
    pub reference: usize,
    /// `|observed - reference| / reference`
    pub relative_deviation: f64,
    /// Deviation above 25%.
    pub flagged: bool,
}

pub fn compare_with_reference(bank: &TemplateBank) -> Vec<ReferenceComparison> {
    REFERENCE_COUNTS
        .iter()
        .map(|&(group, reference)| {
            let observed = match group {
                "turn" => bank.count(Category::TurnLeft) + bank.count(Category::TurnRight),
                "forward" => bank.count(Category::Forward),
                _ => bank.count(Category::Stop),
            };
            let relative_deviation = (observed as f64 - reference as f64).abs() / reference as f64;
            ReferenceComparison {
                group,
                observed,
                reference,
                relative_deviation,
                flagged: relative_deviation > 0.25,
            }
        })
        .collect()
}

/// Draws templates uniformly without replacement within one generation
/// episode; an exhausted category is refilled.
pub struct TemplateSampler<'a> {
    bank: &'a TemplateBank,
    pools: BTreeMap<Category, Vec<usize>>,
}

impl<'a> TemplateSampler<'a> {
    pub fn new(bank: &'a TemplateBank) -> Self {
        Self {
            bank,
            pools: BTreeMap::new(),
        }
    }

    pub fn sample(&mut self, category: Category, rng: &mut impl Rng) -> Result<&'a ScoredTemplate> {
        let all = self.bank.get(category);
        if all.is_empty() {
            return Err(Error::MissingTemplate(category));
        }
        let pool = self.pools.entry(category).or_default();
        if pool.is_empty() {
            pool.extend(0..all.len());
        }
        let pick = pool.remove(rng.gen_range(0..pool.len()));
        Ok(&all[pick])
    }

    /// Uniform draw among the slotless templates of `category`.
    pub fn sample_slotless(
        &mut self,
        category: Category,
        rng: &mut impl Rng,
    ) -> Option<&'a ScoredTemplate> {
        let slotless: Vec<&ScoredTemplate> = self
            .bank
            .get(category)
            .iter()
            .filter(|t| !t.template.has_slot())
            .collect();
        if slotless.is_empty() {
            None
        } else {
            Some(slotless[rng.gen_range(0..slotless.len())])
        }
    }
}

/// Single draw from a fresh episode.
pub fn sample_template<'a>(
    bank: &'a TemplateBank,
    category: Category,
    rng: &mut impl Rng,
) -> Result<&'a Template> {
    TemplateSampler::new(bank)
        .sample(category, rng)
        .map(|st| &st.template)
}
