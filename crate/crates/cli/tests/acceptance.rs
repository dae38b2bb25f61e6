//! Acceptance suite: one PASS/FAIL line per criterion, all at their stated
//! tolerances. Run with `cargo test -p vlnaug --test acceptance`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlnaug::{cmd_build_pretrain, cmd_evaluate, cmd_extract_templates, cmd_generate, Outcome, RunConfig};
use vlnaug_core::action_predictor::{
    predict_sequence, rotate_frame, window_scores, FrameImage, RotateDirection, RotationConfig, TurnLabel, ValidRegion,
};
use vlnaug_core::detection_store::DetectionRecord;
use vlnaug_core::jsonl;
use vlnaug_core::navgraph_metrics::{sed, spd, task_completion, NavGraph};
use vlnaug_core::pretrain_data::{build_mlm, build_pretrain, vocabulary, CandidateKind, MlmConfig, PretrainConfig};
use vlnaug_core::synthetic::{fixture_detections, ClipFixture, PanSequence, Panorama, TextureKind};
use vlnaug_core::template_engine::{
    compare_with_reference, extract_templates, lm_filter, Category, ChunkAnnotation, CorpusRecord, LmFilterConfig,
    Rejection, ScoreFile, TemplateBank,
};
use vlnaug_core::trajectory_builder::{merge_actions, FrameEntry, SentenceProvenance, VlnSample};

use TurnLabel::{Forward as F, Left as L, Right as R};

type Outcome_ = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

// ---------------------------------------------------------------------------
// rotation benchmark

fn rotation_benchmark() -> Outcome_ {
    let start = Instant::now();
    let cfg = RotationConfig::default();
    let (mut correct, mut total) = (0usize, 0usize);
    let (mut static_fwd, mut static_total) = (0usize, 0usize);
    for i in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + i);
        let kind = if i % 2 == 0 { TextureKind::Stripes } else { TextureKind::Noise };
        let pano = Panorama::generate(kind, 720, 16, 3, &mut rng);
        let steps: Vec<(TurnLabel, f64)> = (0..6)
            .map(|_| {
                let label = TurnLabel::MOVES[rng.gen_range(0..3)];
                (label, rng.gen_range(cfg.shift_deg..=cfg.shift_deg + 10.0))
            })
            .collect();
        let heading = rng.gen_range(0.0..360.0);
        let seq = PanSequence::render(&pano, 360.0, 360, heading, &steps, 0.01, &mut rng).map_err(|e| e.to_string())?;
        let predicted = predict_sequence(&seq.frames, &cfg).map_err(|e| e.to_string())?;
        for (p, truth) in predicted.iter().zip(&seq.labels) {
            total += 1;
            correct += usize::from(p == truth);
            if *truth == F {
                static_total += 1;
                static_fwd += usize::from(*p == F);
            }
        }
    }
    let elapsed = start.elapsed();
    let accuracy = correct as f64 / total as f64;
    let detail = format!(
        "accuracy {:.4} over {total} pairs, static FORWARD {static_fwd}/{static_total}, {:.1}s",
        accuracy,
        elapsed.as_secs_f64()
    );
    check(accuracy >= 0.95, || detail.clone())?;
    check(static_fwd == static_total, || detail.clone())?;
    check(elapsed < Duration::from_secs(60), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// windowed MSE against a brute-force oracle

fn mse_oracle(a: &FrameImage, b: &FrameImage, region: ValidRegion, d: usize) -> Vec<f64> {
    let count = (region.end - region.start) / d;
    let mut out = Vec::new();
    for k in 0..count {
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..a.height() {
            for x in region.start + k * d..region.start + (k + 1) * d {
                for c in 0..a.channels() {
                    let diff = a.get(x, y, c) - b.get(x, y, c);
                    sum += diff * diff;
                    n += 1;
                }
            }
        }
        out.push(sum / n as f64);
    }
    out
}

fn windowed_mse_oracle() -> Outcome_ {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let w = rng.gen_range(2..64);
        let h = rng.gen_range(1..6);
        let c = if rng.gen_bool(0.5) { 1 } else { 3 };
        let a = FrameImage::from_fn(w, h, c, |_, _, _| rng.gen::<f64>()).unwrap();
        let (b, region) = if case % 2 == 0 {
            let dir = if rng.gen_bool(0.5) { RotateDirection::Left } else { RotateDirection::Right };
            let src = FrameImage::from_fn(w, h, c, |_, _, _| rng.gen::<f64>()).unwrap();
            rotate_frame(&src, dir, rng.gen_range(0..w)).unwrap()
        } else {
            let s = rng.gen_range(0..w);
            let e = rng.gen_range(s + 1..=w);
            (FrameImage::from_fn(w, h, c, |_, _, _| rng.gen::<f64>()).unwrap(), ValidRegion { start: s, end: e })
        };
        let d = rng.gen_range(1..=region.width());
        let got = window_scores(&a, &b, region, d).map_err(|e| e.to_string())?;
        let expected = mse_oracle(&a, &b, region, d);
        check(got.len() == region.width() / d, || format!("case {case}: {} scores", got.len()))?;
        for (g, e) in got.iter().zip(&expected) {
            worst = worst.max((g - e).abs());
        }
    }
    check(worst <= 1e-12, || format!("max error {worst:e}"))?;
    Ok(format!("1000 pairs, max abs error {worst:e}"))
}

// ---------------------------------------------------------------------------
// template pipeline on the fixture corpus

fn load_fixture_extraction() -> Result<(Vec<CorpusRecord>, Vec<ChunkAnnotation>), String> {
    let corpus = jsonl::read_records(&fixtures().join("corpus.jsonl")).map_err(|e| e.to_string())?;
    let annotations = jsonl::read_records(&fixtures().join("annotations.jsonl")).map_err(|e| e.to_string())?;
    Ok((corpus, annotations))
}

/// Worked out by hand from the fixture corpus: every template a sentence
/// yields after masking, in corpus order.
fn hand_candidates() -> Vec<(&'static str, Category, &'static str)> {
    use Category::*;
    vec![
        ("r01#0", TurnLeft, "turn left at the <OBJECT> ."),
        ("r01#1", Forward, "go forward past the <OBJECT> ."),
        ("r02#0", TurnRight, "turn right after the <OBJECT> ."),
        ("r02#1", Stop, "stop next to the <OBJECT> ."),
        ("r03#0", TurnLeft, "make a left ."),
        ("r03#1", Forward, "keep going forward ."),
        ("r03#2", Stop, "stop here ."),
        ("r06#0", TurnLeft, "turn left !"),
        ("r06#1", Forward, "go forward until the <OBJECT> ."),
        ("r07#0", TurnLeft, "turn left at the <OBJECT> ."),
        ("r07#1", Stop, "stop in the <OBJECT> ."),
        ("r08#0", TurnRight, "turn right at the <OBJECT> ?"),
        ("r08#1", TurnLeft, "keep left of the <OBJECT> ."),
        ("r09#0", TurnRight, "Turn Right at the <OBJECT> ."),
        ("r10#0", Forward, "walk forward past the <OBJECT> ."),
        ("r10#1", TurnRight, "bear right at the <OBJECT> ."),
        ("r10#2", Stop, "stop before the <OBJECT> ."),
        ("r11#0", TurnLeft, "turn left onto the <OBJECT> ."),
        ("r11#1", Forward, "follow the <OBJECT> forward ."),
        ("r12#1", TurnRight, "turn right ."),
        ("r12#2", Forward, "go forward ."),
        ("r12#3", Stop, "stop at the <OBJECT> ."),
        ("r12#4", TurnLeft, "left is the <OBJECT> ."),
        ("r13#0", Forward, "turn around and go forward ."),
    ]
}

/// Survivors of the 0.5 cut under the fixture score table. Mean losses:
/// TURN_LEFT r03#0 1.0 < r08#1 1.5 < r01#0 = r11#0 2.0 (corpus order breaks
/// the tie) keep 3 of 6; TURN_RIGHT r12#1 1.0 then r08#0 = r09#0 = r10#1 2.0
/// keep 3 of 5; FORWARD keep 4 of 7; STOP r10#2 0.5 then three at 1.0, keep 3
/// of 5.
fn hand_retained() -> BTreeMap<Category, Vec<&'static str>> {
    BTreeMap::from([
        (Category::TurnLeft, vec!["r01#0", "r03#0", "r08#1"]),
        (Category::TurnRight, vec!["r08#0", "r09#0", "r12#1"]),
        (Category::Forward, vec!["r01#1", "r06#1", "r11#1", "r12#2"]),
        (Category::Stop, vec!["r02#1", "r03#2", "r10#2"]),
    ])
}

fn template_fixture_oracle() -> Outcome_ {
    let (corpus, annotations) = load_fixture_extraction()?;
    let extraction = extract_templates(&corpus, &annotations).map_err(|e| e.to_string())?;
    check(extraction.sentences == 30, || format!("{} sentences", extraction.sentences))?;
    let got: Vec<(String, Category, String)> = extraction
        .candidates
        .iter()
        .map(|t| (t.id.clone(), t.category, t.text.clone()))
        .collect();
    let want: Vec<(String, Category, String)> = hand_candidates()
        .into_iter()
        .map(|(i, c, t)| (i.to_string(), c, t.to_string()))
        .collect();
    check(got == want, || format!("candidates differ:\n got {got:?}\nwant {want:?}"))?;
    let rejected = BTreeMap::from([
        (Rejection::MultipleObjects, 3),
        (Rejection::MultipleDirections, 1),
        (Rejection::NoDirection, 2),
    ]);
    check(extraction.rejected == rejected, || format!("rejections {:?}", extraction.rejected))?;

    let mut scores = ScoreFile::load(&fixtures().join("scores.jsonl")).map_err(|e| e.to_string())?;
    let bank = lm_filter(&extraction.candidates, &mut scores, &LmFilterConfig::default()).map_err(|e| e.to_string())?;
    let distinct = BTreeMap::from([
        (Category::TurnLeft, 6),
        (Category::TurnRight, 5),
        (Category::Forward, 7),
        (Category::Stop, 5),
    ]);
    check(bank.metadata.candidates == distinct, || format!("distinct {:?}", bank.metadata.candidates))?;
    let retained: BTreeMap<Category, Vec<&str>> = bank
        .templates
        .iter()
        .map(|(c, l)| (*c, l.iter().map(|t| t.template.id.as_str()).collect()))
        .collect();
    check(retained == hand_retained(), || format!("retained {retained:?}"))?;
    for (category, list) in &bank.templates {
        for st in list {
            let t = &st.template;
            check(t.slot_count() <= 1 && t.category == *category && t.is_well_formed(), || {
                format!("template {} breaks slot/direction invariants", t.id)
            })?;
        }
    }

    let full = LmFilterConfig { keep_fraction: 1.0, ..Default::default() };
    let mut scores = ScoreFile::load(&fixtures().join("scores.jsonl")).map_err(|e| e.to_string())?;
    let unfiltered = lm_filter(&extraction.candidates, &mut scores, &full).map_err(|e| e.to_string())?;
    for (c, n) in &distinct {
        check(unfiltered.count(*c) == *n, || format!("keep 1.0 kept {} {c}", unfiltered.count(*c)))?;
    }

    let comparison = compare_with_reference(&bank)
        .iter()
        .map(|r| format!("{} {}/{}", r.group, r.observed, r.reference))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(format!("24 candidates, 13 retained; reference (informational): {comparison}"))
}

// ---------------------------------------------------------------------------
// merge_actions

fn merge_actions_sequences() -> Outcome_ {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let start = Instant::now();
    for case in 0..10_000 {
        let n = rng.gen_range(0..80);
        let seq: Vec<TurnLabel> = (0..n).map(|_| TurnLabel::MOVES[rng.gen_range(0..3)]).collect();
        let segments = merge_actions(&seq).map_err(|e| e.to_string())?;
        let mut expanded = Vec::with_capacity(n);
        for s in &segments {
            expanded.extend(std::iter::repeat_n(s.action, s.length));
        }
        check(expanded == seq, || format!("case {case}: re-expansion differs"))?;
        check(segments.iter().all(|s| s.action != F || s.length <= 6), || format!("case {case}: FORWARD > 6"))?;
        check(
            segments.windows(2).all(|w| w[0].action != w[1].action || w[0].action == F),
            || format!("case {case}: adjacent turn segments share a label"),
        )?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(5), || format!("{:.2}s", elapsed.as_secs_f64()))?;
    Ok(format!("10000 sequences in {:.2}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// metrics on hand-built graphs

struct Built {
    name: String,
    n: usize,
    edges: Vec<(usize, usize)>,
}

fn hand_graphs() -> Vec<Built> {
    let mut out = Vec::new();
    for n in 2..=8 {
        out.push(Built { name: format!("path{n}"), n, edges: (1..n).map(|i| (i - 1, i)).collect() });
    }
    for n in 3..=9 {
        out.push(Built { name: format!("cycle{n}"), n, edges: (0..n).map(|i| (i, (i + 1) % n)).collect() });
    }
    for (r, c) in [(2, 2), (2, 3), (3, 3), (4, 4), (5, 5), (7, 7)] {
        let mut edges = Vec::new();
        for y in 0..r {
            for x in 0..c {
                let id = y * c + x;
                if x + 1 < c {
                    edges.push((id, id + 1));
                }
                if y + 1 < r {
                    edges.push((id, id + c));
                }
            }
        }
        out.push(Built { name: format!("grid{r}x{c}"), n: r * c, edges });
    }
    out
}

fn all_pairs(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in edges {
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                d[i][j] = d[i][j].min(d[i][k] + d[k][j]);
            }
        }
    }
    d
}

fn edit_distance(a: &[String], b: &[String]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn random_walk(n_steps: usize, start: usize, edges: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut walk = vec![start];
    for _ in 0..n_steps {
        let here = *walk.last().unwrap();
        let next: Vec<usize> = edges
            .iter()
            .filter_map(|&(a, b)| if a == here { Some(b) } else if b == here { Some(a) } else { None })
            .collect();
        walk.push(next[rng.gen_range(0..next.len())]);
    }
    walk
}

fn metrics_suite() -> Outcome_ {
    let graphs = hand_graphs();
    check(graphs.len() == 20 && graphs.iter().all(|g| g.n <= 50), || "graph set".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    for g in &graphs {
        let graph = NavGraph::new(
            (0..g.n).map(|i| (i.to_string(), 0.0)),
            g.edges.iter().map(|&(a, b)| (a.to_string(), b.to_string(), None)),
        )
        .map_err(|e| e.to_string())?;
        let dist = all_pairs(g.n, &g.edges);
        let ids = |w: &[usize]| w.iter().map(|i| i.to_string()).collect::<Vec<_>>();
        for _ in 0..50 {
            let gold_walk = random_walk(rng.gen_range(0..8), rng.gen_range(0..g.n), &g.edges, &mut rng);
            let pred_walk = if rng.gen_bool(0.2) {
                gold_walk.clone()
            } else {
                random_walk(rng.gen_range(0..8), gold_walk[0], &g.edges, &mut rng)
            };
            let goal = if rng.gen_bool(0.7) { *gold_walk.last().unwrap() } else { rng.gen_range(0..g.n) };
            let (gold, pred) = (ids(&gold_walk), ids(&pred_walk));
            let last = *pred_walk.last().unwrap();

            let adjacent = g.edges.iter().any(|&(a, b)| (a, b) == (last, goal) || (b, a) == (last, goal));
            let tc_oracle = u8::from(last == goal || adjacent);
            let tc = task_completion(&graph, &pred, &goal.to_string()).map_err(|e| e.to_string())?;
            check(tc == tc_oracle, || format!("{}: TC {tc} vs {tc_oracle}", g.name))?;

            let d = spd(&graph, &pred, &goal.to_string()).map_err(|e| e.to_string())?;
            check(d == dist[last][goal] as f64, || format!("{}: SPD {d} vs {}", g.name, dist[last][goal]))?;

            let longest = pred.len().max(gold.len()) as f64;
            let sed_oracle = tc_oracle as f64 * (1.0 - edit_distance(&pred, &gold) as f64 / longest);
            let s = sed(&graph, &pred, &gold, &goal.to_string()).map_err(|e| e.to_string())?;
            check(s == sed_oracle, || format!("{}: SED {s} vs {sed_oracle}", g.name))?;
            check((s == 1.0) == (pred == gold && tc == 1), || format!("{}: SED = 1 iff identical and TC", g.name))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} trajectories on 20 graphs"))
}

// ---------------------------------------------------------------------------
// proxy-task emitters

fn vln_sample(id: &str, actions: &[TurnLabel], instruction: &str) -> VlnSample {
    let segments = merge_actions(actions).unwrap();
    VlnSample {
        sample_id: id.to_string(),
        video_id: id.to_string(),
        frames: (0..=actions.len())
            .map(|i| FrameEntry { index: i * 2, path: format!("{id}/{i:05}.png").into(), t: i as f64 })
            .collect(),
        actions: actions.to_vec(),
        provenance: (0..=segments.len())
            .map(|i| SentenceProvenance {
                segment_index: i,
                action: segments.get(i).map_or(TurnLabel::Stop, |s| s.action),
                template_id: "fixture".into(),
                object: None,
            })
            .collect(),
        segments,
        instruction: instruction.to_string(),
    }
}

const LONG_INSTRUCTION: &str = "go forward past the bench . turn left at the awning . keep going forward until \
    you reach the signboard . turn right after the traffic light . go straight and follow the block . stop next to \
    the telephone pole on the right .";

fn proxy_task_emitters() -> Outcome_ {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples: Vec<VlnSample> = (0..150)
        .map(|i| {
            let n = rng.gen_range(1..30);
            let actions: Vec<TurnLabel> = (0..n).map(|_| TurnLabel::MOVES[rng.gen_range(0..3)]).collect();
            vln_sample(&format!("s{i:03}"), &actions, LONG_INSTRUCTION)
        })
        .collect();
    let out = build_pretrain(&samples, &PretrainConfig::default(), 21).map_err(|e| e.to_string())?;
    check(out.itm.len() == samples.len(), || format!("{} ITM samples", out.itm.len()))?;
    let by_id: BTreeMap<&str, &VlnSample> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    for itm in &out.itm {
        let positive = by_id[itm.sample_id.as_str()];
        check(itm.candidates.len() == 5, || format!("{}: {} candidates", itm.sample_id, itm.candidates.len()))?;
        let kinds: Vec<CandidateKind> = itm.candidates.iter().map(|c| c.kind).collect();
        let count = |k| kinds.iter().filter(|x| **x == k).count();
        check(
            count(CandidateKind::Positive) == 1 && count(CandidateKind::InBatch) == 2 && count(CandidateKind::Shuffled) == 2,
            || format!("{}: kinds {kinds:?}", itm.sample_id),
        )?;
        check(itm.candidates[itm.positive_index].frames == positive.frames, || "positive index".into())?;
        let multiset = |f: &[FrameEntry]| f.iter().map(|e| e.index).collect::<Vec<_>>().tap_sort();
        for c in &itm.candidates {
            match c.kind {
                CandidateKind::Shuffled => {
                    check(c.frames != positive.frames, || format!("{}: shuffle keeps order", itm.sample_id))?;
                    check(multiset(&c.frames) == multiset(&positive.frames), || "shuffle multiset".into())?;
                }
                CandidateKind::InBatch => check(c.source_sample_id != itm.sample_id, || "in-batch is positive".into())?,
                CandidateKind::Positive => {}
            }
        }
    }
    let nap_expected: usize = samples.iter().map(|s| s.actions.len() + 1).sum();
    check(out.nap.len() == nap_expected, || format!("NAP {} vs {nap_expected}", out.nap.len()))?;

    let probe = &samples[0];
    let vocab = vocabulary(&samples);
    let cfg = MlmConfig::default();
    let tokens = vlnaug_core::template_engine::tokenize(&probe.instruction).len();
    let (mut masked, trials) = (0usize, 10_000);
    let mut mlm_rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..trials {
        masked += build_mlm(probe, &cfg, &vocab, &mut mlm_rng).map_err(|e| e.to_string())?.masked_positions.len();
    }
    let rate = masked as f64 / (trials * tokens) as f64;
    check((rate - cfg.mask_prob).abs() <= 0.01, || format!("mask rate {rate}"))?;
    Ok(format!(
        "{} ITM (5 candidates each), {} NAP = sum(actions + 1), MLM rate {rate:.4}",
        out.itm.len(),
        out.nap.len()
    ))
}

trait TapSort {
    fn tap_sort(self) -> Self;
}

impl TapSort for Vec<usize> {
    fn tap_sort(mut self) -> Self {
        self.sort_unstable();
        self
    }
}

// ---------------------------------------------------------------------------
// end-to-end determinism and the fixture-only run

/// Five synthetic clips with detections, plus a bank extracted from the
/// fixture corpus, laid out as an on-disk run directory.
fn synthetic_workspace(root: &Path) -> Result<RunConfig, String> {
    let data = root.join("data");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut manifest = Vec::new();
    let mut detections: Vec<DetectionRecord> = Vec::new();
    type Spec<'a> = (&'a str, f64, &'a [(f64, TurnLabel)]);
    let specs: [Spec; 5] = [
        ("clip_a", 40.0, &[(6.0, L), (20.0, R)]),
        ("clip_b", 35.0, &[(10.0, R), (11.5, R), (25.0, L)]),
        ("clip_c", 45.0, &[]),
        ("clip_d", 30.0, &[(3.0, L), (8.0, L), (13.0, L), (18.0, L)]),
        ("clip_e", 38.0, &[(15.0, R)]),
    ];
    for (id, duration, turns) in specs {
        let clip = ClipFixture::new(id, duration)
            .with_turns(turns)
            .write(&data, &mut rng)
            .map_err(|e| e.to_string())?;
        detections.extend(fixture_detections(&clip, &mut rng));
        manifest.push(clip.to_record_json().map_err(|e| e.to_string())?);
    }
    std::fs::write(data.join("clips.jsonl"), manifest.join("\n") + "\n").map_err(|e| e.to_string())?;
    jsonl::write_records(&data.join("detections.jsonl"), &detections).map_err(|e| e.to_string())?;

    let mut cfg = RunConfig {
        seed: 17,
        out: root.join("templates"),
        corpus: Some(fixtures().join("corpus.jsonl")),
        annotations: Some(fixtures().join("annotations.jsonl")),
        scores: Some(fixtures().join("scores.jsonl")),
        ..Default::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let outcome = cmd_extract_templates(&cfg).map_err(|e| e.to_string())?;
    check(outcome == Outcome::Success, || "template extraction partial".into())?;

    cfg.bank = Some(root.join("templates/bank.json"));
    cfg.clips = Some(data.join("clips.jsonl"));
    cfg.detections = Some(data.join("detections.jsonl"));
    Ok(cfg)
}

fn read_all(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut queue = VecDeque::from([dir.to_path_buf()]);
    while let Some(d) = queue.pop_front() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                queue.push_back(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn end_to_end_determinism() -> Outcome_ {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = synthetic_workspace(tmp.path())?;
    let mut runs = Vec::new();
    for (k, workers) in [(0, 1usize), (1, 4)] {
        let mut cfg = base.clone();
        cfg.out = tmp.path().join(format!("run{k}"));
        cfg.workers = Some(workers);
        check(cmd_generate(&cfg).map_err(|e| e.to_string())? == Outcome::Success, || "generate partial".into())?;
        check(cmd_build_pretrain(&cfg).map_err(|e| e.to_string())? == Outcome::Success, || "pretrain partial".into())?;
        runs.push(read_all(&cfg.out));
    }
    let elapsed = start.elapsed();
    let files: BTreeSet<&String> = runs[0].keys().collect();
    check(runs[0] == runs[1], || "outputs differ between runs".into())?;
    let samples: Vec<VlnSample> =
        jsonl::read_records(&tmp.path().join("run0/samples.jsonl")).map_err(|e| e.to_string())?;
    check(samples.len() == 5, || format!("{} samples from 5 clips", samples.len()))?;
    for s in &samples {
        s.check_consistency().map_err(|e| e.to_string())?;
    }
    check(elapsed < Duration::from_secs(30), || format!("{:.1}s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "{} files byte-identical across runs, 5 clips in {:.1}s",
        files.len(),
        elapsed.as_secs_f64()
    ))
}

fn fixture_only_run() -> Outcome_ {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = synthetic_workspace(tmp.path())?;
    check(cfg.scorer_cmd.is_none(), || "external scorer configured".into())?;
    cfg.out = tmp.path().join("run");
    check(cmd_generate(&cfg).map_err(|e| e.to_string())? == Outcome::Success, || "generate".into())?;
    check(cmd_build_pretrain(&cfg).map_err(|e| e.to_string())? == Outcome::Success, || "build-pretrain".into())?;
    cfg.graph = Some(fixtures().join("graph.json"));
    cfg.eval_batch = Some(fixtures().join("eval_batch.jsonl"));
    check(cmd_evaluate(&cfg).map_err(|e| e.to_string())? == Outcome::Success, || "evaluate".into())?;
    let summary: serde_json::Value =
        jsonl::read_json(&cfg.out.join("metrics_summary.json")).map_err(|e| e.to_string())?;
    // hand-computed on the 3x3 fixture grid
    let means = [("tc", 0.75), ("spd", 1.25), ("sed", 0.5625)];
    for (key, want) in means {
        check(summary[key].as_f64() == Some(want), || format!("{key} = {}", summary[key]))?;
    }
    let bank = TemplateBank::load(&tmp.path().join("templates/bank.json")).map_err(|e| e.to_string())?;
    check(bank.metadata.scorer.starts_with("score-file:"), || bank.metadata.scorer.clone())?;
    Ok("extract, generate, build-pretrain and evaluate ran on fixture files only".into())
}

fn main() -> std::process::ExitCode {
    type Criterion = (&'static str, fn() -> Outcome_);
    let criteria: [Criterion; 8] = [
        ("rotation predictor synthetic benchmark", rotation_benchmark),
        ("windowed_mse equals brute-force oracle", windowed_mse_oracle),
        ("template pipeline on fixture corpus", template_fixture_oracle),
        ("merge_actions on 10k random sequences", merge_actions_sequences),
        ("TC/SPD/SED on 20 hand-built graphs", metrics_suite),
        ("proxy-task emitters", proxy_task_emitters),
        ("end-to-end determinism", end_to_end_determinism),
        ("fixture-only primary suite", fixture_only_run),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                println!("FAIL  {name}: {detail}");
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
        std::process::ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria: {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
