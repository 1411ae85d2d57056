//! Evaluation protocols, majority voting and reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Database, DatasetManifest};
use crate::error::{Error, Result};
use crate::training::{predict, Checkpoint, SplitTag, TrainWindow};

/// Subjects of DB-b carried into the inter-session experiments.
pub const DBB_SUBJECTS: std::ops::RangeInclusive<u32> = 1..=9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentProtocol {
    /// DB-a: odd repetitions train, even repetitions test.
    IntraSessionDba,
    /// DB-b subjects 1-9: session 1 trains, session 2 tests.
    InterSessionDbb,
    /// As inter-session, plus `fraction` of every (subject, gesture)'s
    /// session-2 windows moved into training.
    AdaptationDbb { fraction: f64 },
}

impl Default for ExperimentProtocol {
    fn default() -> Self {
        ExperimentProtocol::IntraSessionDba
    }
}

impl fmt::Display for ExperimentProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentProtocol::IntraSessionDba => write!(f, "intra_session_dba"),
            ExperimentProtocol::InterSessionDbb => write!(f, "inter_session_dbb"),
            ExperimentProtocol::AdaptationDbb { fraction } => write!(f, "adaptation_dbb({fraction})"),
        }
    }
}

impl ExperimentProtocol {
    pub fn validate(&self) -> Result<()> {
        if let ExperimentProtocol::AdaptationDbb { fraction } = self {
            if !(0.0..=1.0).contains(fraction) {
                return Err(Error::Config(format!("adaptation fraction {fraction} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One window of one manifest trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowRef {
    pub trial: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub protocol: ExperimentProtocol,
    pub train: Vec<WindowRef>,
    pub test: Vec<WindowRef>,
}

fn all_windows(manifest: &DatasetManifest, trial: usize) -> impl Iterator<Item = WindowRef> {
    (0..manifest.trials[trial].num_windows()).map(move |frame| WindowRef { trial, frame })
}

impl Split {
    /// Assigns the windows of `manifest` to train and test. `seed` only
    /// affects which session-2 windows the adaptation protocol moves.
    pub fn build(protocol: ExperimentProtocol, manifest: &DatasetManifest, seed: u64) -> Result<Split> {
        protocol.validate()?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        match protocol {
            ExperimentProtocol::IntraSessionDba => {
                let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
                for (i, t) in manifest.trials.iter().enumerate() {
                    if t.db == Database::Dba {
                        groups.entry((t.subject, t.gesture)).or_default().push(i);
                    }
                }
                for ((subject, gesture), trials) in &groups {
                    let odd = trials.iter().filter(|&&i| manifest.trials[i].trial % 2 == 1).count();
                    if 2 * odd != trials.len() {
                        return Err(Error::Eval(format!(
                            "subject {subject} gesture {gesture}: {} repetitions cannot split in half by parity",
                            trials.len()
                        )));
                    }
                    for &i in trials {
                        let dst = if manifest.trials[i].trial % 2 == 1 { &mut train } else { &mut test };
                        dst.extend(all_windows(manifest, i));
                    }
                }
            }
            ExperimentProtocol::InterSessionDbb | ExperimentProtocol::AdaptationDbb { .. } => {
                let mut moved: BTreeMap<(u32, u32), Vec<WindowRef>> = BTreeMap::new();
                for (i, t) in manifest.trials.iter().enumerate() {
                    if t.db != Database::Dbb || !DBB_SUBJECTS.contains(&t.subject) {
                        continue;
                    }
                    match t.session {
                        1 => train.extend(all_windows(manifest, i)),
                        2 => moved.entry((t.subject, t.gesture)).or_default().extend(all_windows(manifest, i)),
                        _ => {}
                    }
                }
                let fraction = match protocol {
                    ExperimentProtocol::AdaptationDbb { fraction } => fraction,
                    _ => 0.0,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for (_, mut windows) in moved {
                    windows.shuffle(&mut rng);
                    let k = (fraction * windows.len() as f64).round() as usize;
                    train.extend_from_slice(&windows[..k]);
                    test.extend_from_slice(&windows[k..]);
                }
            }
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::Eval(format!("protocol {protocol} leaves an empty train or test set")));
        }
        train.sort();
        test.sort();
        Ok(Split { protocol, train, test })
    }

    /// Digest of the training windows, independent of manifest order.
    pub fn fingerprint(&self, manifest: &DatasetManifest) -> String {
        let mut keys: Vec<String> = self
            .train
            .iter()
            .map(|w| {
                let t = &manifest.trials[w.trial];
                format!("{}/{}/{}/{}/{}/{}", t.db.dir_name(), t.subject, t.session, t.gesture, t.trial, w.frame)
            })
            .collect();
        keys.sort();
        // FNV-1a over the joined keys
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in keys.join("\n").bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn tag(&self, manifest: &DatasetManifest) -> SplitTag {
        SplitTag {
            protocol: self.protocol.to_string(),
            fingerprint: self.fingerprint(manifest),
        }
    }
}

/// Loads the referenced windows at `side x side`; each trial is read once.
pub fn load_windows(manifest: &DatasetManifest, refs: &[WindowRef], side: usize) -> Result<Vec<TrainWindow>> {
    let mut cache: HashMap<usize, Vec<TrainWindow>> = HashMap::new();
    let mut out = Vec::with_capacity(refs.len());
    for r in refs {
        if !cache.contains_key(&r.trial) {
            let ws = manifest
                .load_windows(r.trial)?
                .iter()
                .map(|w| TrainWindow::from_sample(w, side, r.trial))
                .collect::<Result<Vec<_>>>()?;
            cache.insert(r.trial, ws);
        }
        let w = cache[&r.trial]
            .get(r.frame)
            .ok_or_else(|| Error::Eval(format!("trial {} has no frame {}", r.trial, r.frame)))?;
        out.push(w.clone());
    }
    Ok(out)
}

/// Modal label; ties go to the smallest label.
pub fn majority_vote(preds: &[usize]) -> Result<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in preds {
        *counts.entry(p).or_default() += 1;
    }
    counts
        .iter()
        .fold(None, |best: Option<(usize, usize)>, (&label, &n)| match best {
            Some((_, m)) if m >= n => best,
            _ => Some((label, n)),
        })
        .map(|(label, _)| label)
        .ok_or_else(|| Error::Eval("majority vote over no predictions".into()))
}

/// `m[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != labels.len() {
        return Err(Error::Eval(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::Eval(format!("label pair ({l}, {p}) outside {k} classes")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(m: &[Vec<u64>]) -> f64 {
    let total: u64 = m.iter().flatten().sum();
    let diag: u64 = (0..m.len()).map(|i| m[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        diag as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> MeanStd {
        if xs.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub subject: u32,
    pub windows: usize,
    pub trials: usize,
    pub frame_accuracy: f64,
    pub vote_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub num_classes: usize,
    pub subjects: Vec<SubjectResult>,
    pub frame_accuracy: MeanStd,
    pub vote_accuracy: MeanStd,
    /// Per-frame counts, rows are true labels.
    pub confusion: Vec<Vec<u64>>,
    /// Zero for classes never predicted.
    pub precision: Vec<f64>,
    /// Zero for classes absent from the test set.
    pub recall: Vec<f64>,
}

/// A classified test window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub subject: u32,
    /// Recording the window belongs to (voting unit).
    pub trial: usize,
    pub label: usize,
    pub pred: usize,
}

/// Aggregates per-window predictions into a report.
pub fn summarize(protocol: &str, scored: &[Scored], k: usize) -> Result<EvalReport> {
    if scored.is_empty() {
        return Err(Error::Eval("no test windows".into()));
    }
    let preds: Vec<usize> = scored.iter().map(|s| s.pred).collect();
    let labels: Vec<usize> = scored.iter().map(|s| s.label).collect();
    let confusion = confusion_matrix(&preds, &labels, k)?;
    let mut by_subject: BTreeMap<u32, Vec<&Scored>> = BTreeMap::new();
    for s in scored {
        by_subject.entry(s.subject).or_default().push(s);
    }
    let mut subjects = Vec::new();
    for (subject, items) in by_subject {
        let hits = items.iter().filter(|s| s.pred == s.label).count();
        let mut trials: BTreeMap<usize, (usize, Vec<usize>)> = BTreeMap::new();
        for s in &items {
            let e = trials.entry(s.trial).or_insert((s.label, Vec::new()));
            if e.0 != s.label {
                return Err(Error::Eval(format!("trial {} mixes labels", s.trial)));
            }
            e.1.push(s.pred);
        }
        let mut votes = 0;
        for (label, p) in trials.values() {
            if majority_vote(p)? == *label {
                votes += 1;
            }
        }
        subjects.push(SubjectResult {
            subject,
            windows: items.len(),
            trials: trials.len(),
            frame_accuracy: hits as f64 / items.len() as f64,
            vote_accuracy: votes as f64 / trials.len() as f64,
        });
    }
    let col = |j: usize| (0..k).map(|i| confusion[i][j]).sum::<u64>();
    let row = |i: usize| confusion[i].iter().sum::<u64>();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalReport {
        protocol: protocol.to_string(),
        num_classes: k,
        frame_accuracy: MeanStd::of(&subjects.iter().map(|s| s.frame_accuracy).collect::<Vec<_>>()),
        vote_accuracy: MeanStd::of(&subjects.iter().map(|s| s.vote_accuracy).collect::<Vec<_>>()),
        subjects,
        precision: (0..k).map(|j| ratio(confusion[j][j], col(j))).collect(),
        recall: (0..k).map(|i| ratio(confusion[i][i], row(i))).collect(),
        confusion,
    })
}

/// Evaluates a Stage 3 checkpoint on the test side of `protocol`.
pub fn run_experiment(
    protocol: ExperimentProtocol,
    manifest: &DatasetManifest,
    ckpt: &Checkpoint,
    split_seed: u64,
) -> Result<EvalReport> {
    if ckpt.header.stage != 3 {
        return Err(Error::Eval(format!("need a stage 3 checkpoint, got stage {}", ckpt.header.stage)));
    }
    let split = Split::build(protocol, manifest, split_seed)?;
    let expected = split.tag(manifest);
    match &ckpt.header.split {
        Some(tag) if *tag == expected => {}
        Some(tag) => {
            return Err(Error::Eval(format!(
                "checkpoint was trained on split {} ({}), protocol gives {} ({})",
                tag.protocol, tag.fingerprint, expected.protocol, expected.fingerprint
            )))
        }
        None => return Err(Error::Eval("checkpoint records no training split".into())),
    }
    let (model, store) = ckpt.restore()?;
    let windows = load_windows(manifest, &split.test, model.cfg.input_size)?;
    let preds = predict(&model, &store, &windows, 32)?;
    let scored: Vec<Scored> = windows
        .iter()
        .zip(preds)
        .map(|(w, pred)| Scored {
            subject: manifest.trials[w.trial].subject,
            trial: w.trial,
            label: w.label,
            pred,
        })
        .collect();
    summarize(&protocol.to_string(), &scored, model.cfg.num_classes)
}

/// Writes `report.json`, `confusion.csv` and `confusion.png` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("report.json");
    fs::write(&p, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&p, e))?;
    let p = dir.join("confusion.csv");
    fs::write(&p, confusion_csv(&report.confusion)).map_err(|e| Error::io(&p, e))?;
    render_confusion(&dir.join("confusion.png"), &report.confusion)
}

pub fn confusion_csv(m: &[Vec<u64>]) -> String {
    m.iter()
        .map(|r| r.iter().map(u64::to_string).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

const CELL: usize = 32;

/// Row-normalised heat map, white (0) to dark blue (1), one cell per
/// (true, predicted) pair with grey grid lines.
pub fn render_confusion(path: &Path, m: &[Vec<u64>]) -> Result<()> {
    let k = m.len().max(1);
    let side = (k * CELL + 1) as u32;
    let mut rgb = vec![0u8; (side * side * 3) as usize];
    for y in 0..side as usize {
        for x in 0..side as usize {
            let px = &mut rgb[(y * side as usize + x) * 3..][..3];
            if x % CELL == 0 || y % CELL == 0 {
                px.copy_from_slice(&[160, 160, 160]);
                continue;
            }
            let (i, j) = (y / CELL, x / CELL);
            let total: u64 = m.get(i).map_or(0, |r| r.iter().sum());
            let v = if total == 0 { 0.0 } else { m[i][j] as f64 / total as f64 };
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * v).round() as u8;
            px.copy_from_slice(&[shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0)]);
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), side, side);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Eval(format!("cannot write {}: {e}", path.display()));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&rgb).map_err(png_err)?;
    w.finish().map_err(png_err)
}
