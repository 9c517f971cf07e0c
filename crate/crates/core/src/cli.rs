//! `rcf synth|train|tune|eval|export`: configuration handling, dataset I/O,
//! the mIoU metric and the command implementations.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datagen::{
    gen_sequence, read_features, read_flo, read_pgm, read_ppm, write_features, write_flo, write_pgm, write_ppm, FeatureMap,
    FlowField, Frame, Mask, Scenario, SequenceParams, SyntheticSequence,
};
use crate::error::{ensure_shape, RcfError, Result};
use crate::model::{predict_mask, train_stage1_logged, Checkpoint, Dataset, PairSample, SegModel, StepLog, TrainConfig};
use crate::refine::{crf_refine, train_stage2_logged, CrfParams};
use crate::tuner::{select_object_channel, select_setting, AlignmentReport, Setting};

pub const THRESHOLD: f64 = 0.5;
pub const MANIFEST: &str = "manifest.txt";

/// Jaccard index of two binary masks; 1 when both are empty.
pub fn miou(pred: &Mask, gt: &Mask) -> Result<f64> {
    ensure_shape!(
        pred.height == gt.height && pred.width == gt.width && pred.len() == gt.len(),
        "prediction {}x{} vs ground truth {}x{}",
        pred.height,
        pred.width,
        gt.height,
        gt.width
    );
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if (p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0) {
            return Err(RcfError::Value(format!("masks must be binary, found {p} / {g}")));
        }
        let (p, g) = (p == 1.0, g == 1.0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEval {
    pub name: String,
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub sequences: Vec<SequenceEval>,
    /// Mean over all frames of all sequences.
    pub mean: f64,
}

impl EvalResult {
    pub fn from_frames(named: Vec<(String, Vec<f64>)>) -> Self {
        let mean_of = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let all: Vec<f64> = named.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let sequences =
            named.into_iter().map(|(name, per_frame)| SequenceEval { mean: mean_of(&per_frame), name, per_frame }).collect();
        Self { sequences, mean: mean_of(&all) }
    }

    /// `sequence,frames,mean_iou` rows followed by an `overall` row.
    pub fn table(&self) -> String {
        let mut s = String::from("sequence,frames,mean_iou\n");
        let mut n = 0;
        for q in &self.sequences {
            s += &format!("{},{},{:.6}\n", q.name, q.per_frame.len(), q.mean);
            n += q.per_frame.len();
        }
        s += &format!("overall,{n},{:.6}\n", self.mean);
        s
    }

    /// One row per frame.
    pub fn frame_csv(&self) -> String {
        let mut s = String::from("sequence,frame,iou\n");
        for q in &self.sequences {
            for (i, v) in q.per_frame.iter().enumerate() {
                s += &format!("{},{i},{v:.6}\n", q.name);
            }
        }
        s
    }
}

/// A sequence as loaded from disk or synthesized in memory.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub name: String,
    pub frames: Vec<Frame>,
    pub flows: Vec<FlowField>,
    pub backward_flows: Option<Vec<FlowField>>,
    pub features: Option<Vec<FeatureMap>>,
    pub gt_masks: Option<Vec<Mask>>,
}

impl SequenceData {
    pub fn from_synthetic(name: String, s: &SyntheticSequence) -> Self {
        Self {
            name,
            frames: s.frames.clone(),
            flows: s.flows.clone(),
            backward_flows: Some(s.backward_flows.clone()),
            features: Some(s.features.clone()),
            gt_masks: Some(s.gt_masks.clone()),
        }
    }
}

pub fn to_dataset(seqs: &[SequenceData]) -> Dataset {
    let mut pairs = Vec::new();
    for s in seqs {
        for t in 0..s.flows.len() {
            pairs.push(PairSample {
                frame_t: s.frames[t].clone(),
                frame_t1: s.frames[t + 1].clone(),
                flow: s.flows[t].clone(),
                backward_flow: s.backward_flows.as_ref().map(|b| b[t].clone()),
                features: s.features.as_ref().map(|f| f[t].clone()),
            });
        }
    }
    Dataset { pairs }
}

/// Seed of the `index`-th synthetic sequence of a run.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(index as u64)
}

pub fn synth_sequences(scenario: Scenario, params: &SequenceParams, seed: u64, first: usize, count: usize) -> Result<Vec<SyntheticSequence>> {
    (first..first + count).map(|i| gen_sequence(scenario, params, sequence_seed(seed, i))).collect()
}

/// Resolved configuration for one command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub crf: CrfParams,
    pub synth: SequenceParams,
    pub scenario: Option<Scenario>,
    pub sequences: usize,
    pub first_sequence: usize,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub stage: u8,
    pub crf_export: bool,
    pub settings: Vec<Setting>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            crf: CrfParams::default(),
            synth: SequenceParams::default(),
            scenario: None,
            sequences: 4,
            first_sequence: 0,
            data: None,
            checkpoint: None,
            out: PathBuf::from("rcf_out"),
            seed: 0,
            stage: 2,
            crf_export: false,
            settings: Vec::new(),
        }
    }
}

/// Parses flat `section.key = value` text. `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| RcfError::Config(format!("config line {}: expected `key = value`, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_setting(name: &str, spec: &str) -> Result<Setting> {
    let mut s = Setting::named(name);
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| RcfError::Config(format!("setting {name}: expected key=value, got {part:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "object_channel" {
            s.channel = Some(v.parse().map_err(|_| RcfError::Config(format!("setting {name}: bad channel {v:?}")))?);
        } else {
            TrainConfig::default().set(k, v)?;
            s.overrides.push((k.to_string(), v.to_string()));
        }
    }
    Ok(s)
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, rest) = key.split_once('.').ok_or_else(|| RcfError::Config(format!("key {key:?} lacks a section prefix")))?;
        match section {
            "train" => {
                self.train.set(rest, value)?;
                if rest == "seed" {
                    self.seed = self.train.seed;
                }
            }
            "crf" => self.crf.set(rest, value)?,
            "synth" => match rest {
                "scenario" => self.scenario = Some(value.parse()?),
                "sequences" => self.sequences = value.parse().map_err(|_| RcfError::Config(format!("bad {key}")))?,
                "first_sequence" => self.first_sequence = value.parse().map_err(|_| RcfError::Config(format!("bad {key}")))?,
                _ => self.synth.set(rest, value)?,
            },
            "run" => match rest {
                "data" => self.data = Some(PathBuf::from(value)),
                "out" => self.out = PathBuf::from(value),
                "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
                "seed" => {
                    self.seed = value.parse().map_err(|_| RcfError::Config(format!("bad {key}")))?;
                    self.train.seed = self.seed;
                }
                "stage" => self.stage = parse_stage(value)?,
                "crf" => self.crf_export = value.parse().map_err(|_| RcfError::Config(format!("bad {key}")))?,
                _ => return Err(RcfError::Config(format!("unknown key {key:?}"))),
            },
            "tune" => {
                if rest == "channels" {
                    for c in value.split(',').map(str::trim).filter(|c| !c.is_empty()) {
                        self.settings.push(parse_setting(&format!("channels={c}"), &format!("channels={c}"))?);
                    }
                } else if let Some(name) = rest.strip_prefix("setting.") {
                    self.settings.push(parse_setting(name, value)?);
                } else {
                    return Err(RcfError::Config(format!("unknown key {key:?}")));
                }
            }
            _ => return Err(RcfError::Config(format!("unknown config section in {key:?}"))),
        }
        Ok(())
    }

    /// Config file first, then flags.
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = &flags.config {
            let text = fs::read_to_string(path)
                .map_err(|e| RcfError::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_config_text(&text)? {
                cfg.apply(&k, &v)?;
            }
        }
        if let Some(s) = flags.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if let Some(s) = &flags.scenario {
            cfg.scenario = Some(s.parse()?);
        }
        if let Some(o) = &flags.out {
            cfg.out = o.clone();
        }
        if let Some(c) = flags.channels {
            cfg.train.channels = c;
        }
        if let Some(l) = flags.lambda {
            cfg.train.lambda = l;
        }
        if let Some(d) = &flags.data {
            cfg.data = Some(d.clone());
        }
        if let Some(c) = &flags.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if let Some(s) = flags.stage {
            cfg.stage = s;
        }
        cfg.crf_export |= flags.crf;
        cfg.train.validate()?;
        cfg.crf.validate()?;
        Ok(cfg)
    }

    /// Sequences from `--data`, or synthesized from `--scenario`.
    pub fn load_sequences(&self) -> Result<Vec<SequenceData>> {
        if let Some(dir) = &self.data {
            if !dir.join(MANIFEST).is_file() {
                return Err(RcfError::Config(format!("no dataset manifest at {}", dir.join(MANIFEST).display())));
            }
            return load_dataset(dir);
        }
        let scenario =
            self.scenario.ok_or_else(|| RcfError::Config("no dataset: pass --data DIR or --scenario NAME".into()))?;
        let seqs = synth_sequences(scenario, &self.synth, self.seed, self.first_sequence, self.sequences)?;
        Ok(seqs.iter().enumerate().map(|(i, s)| SequenceData::from_synthetic(seq_name(self.first_sequence + i), s)).collect())
    }
}

fn parse_stage(v: &str) -> Result<u8> {
    match v.trim() {
        "1" => Ok(1),
        "2" => Ok(2),
        other => Err(RcfError::Config(format!("stage must be 1 or 2, got {other:?}"))),
    }
}

fn seq_name(i: usize) -> String {
    format!("seq_{i:03}")
}

// ---------------------------------------------------------------- dataset files

/// Writes sequences as PPM/FLO/RCFF/PGM files plus a manifest.
pub fn write_dataset(dir: &Path, header: &BTreeMap<String, String>, seqs: &[SequenceData]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    let mut written = Vec::new();
    let mut put = |kind: &str, seq: &str, i: usize, rel: String, rows: &mut Vec<String>| {
        rows.push(format!("{kind},{seq},{i},{rel}"));
        written.push(dir.join(&rel));
        dir.join(rel)
    };
    for s in seqs {
        fs::create_dir_all(dir.join(&s.name))?;
        for (i, f) in s.frames.iter().enumerate() {
            write_ppm(f, put("frame", &s.name, i, format!("{}/frame_{i:03}.ppm", s.name), &mut rows))?;
        }
        for (i, f) in s.flows.iter().enumerate() {
            write_flo(f, put("flow", &s.name, i, format!("{}/flow_{i:03}.flo", s.name), &mut rows))?;
        }
        if let Some(b) = &s.backward_flows {
            for (i, f) in b.iter().enumerate() {
                write_flo(f, put("backward_flow", &s.name, i, format!("{}/backward_{i:03}.flo", s.name), &mut rows))?;
            }
        }
        if let Some(fs_) = &s.features {
            for (i, f) in fs_.iter().enumerate() {
                write_features(f, put("features", &s.name, i, format!("{}/features_{i:03}.rcff", s.name), &mut rows))?;
            }
        }
        if let Some(m) = &s.gt_masks {
            for (i, f) in m.iter().enumerate() {
                write_pgm(f, put("mask", &s.name, i, format!("{}/mask_{i:03}.pgm", s.name), &mut rows))?;
            }
        }
    }
    let mut text = String::from("# rcf dataset manifest\n");
    for (k, v) in header {
        text += &format!("{k} = {v}\n");
    }
    text += "kind,sequence,index,path\n";
    for r in &rows {
        text += r;
        text.push('\n');
    }
    fs::write(dir.join(MANIFEST), text)?;
    written.push(dir.join(MANIFEST));
    Ok(written)
}

#[derive(Default)]
struct Slots {
    frames: BTreeMap<usize, PathBuf>,
    flows: BTreeMap<usize, PathBuf>,
    backward: BTreeMap<usize, PathBuf>,
    features: BTreeMap<usize, PathBuf>,
    masks: BTreeMap<usize, PathBuf>,
}

fn dense<T>(name: &str, kind: &str, m: &BTreeMap<usize, PathBuf>, n: usize, read: impl Fn(&Path) -> Result<T>) -> Result<Vec<T>> {
    if m.len() != n || m.keys().enumerate().any(|(i, &k)| i != k) {
        return Err(RcfError::Format(format!("sequence {name}: expected {kind} 0..{n}, manifest lists {:?}", m.keys().collect::<Vec<_>>())));
    }
    m.values().map(|p| read(p)).collect()
}

fn optional<T>(name: &str, kind: &str, m: &BTreeMap<usize, PathBuf>, n: usize, read: impl Fn(&Path) -> Result<T>) -> Result<Option<Vec<T>>> {
    if m.is_empty() {
        Ok(None)
    } else {
        dense(name, kind, m, n, read).map(Some)
    }
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<SequenceData>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut order: Vec<String> = Vec::new();
    let mut slots: BTreeMap<String, Slots> = BTreeMap::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') || line.contains(" = ") || line == "kind,sequence,index,path" {
            continue;
        }
        let parts: Vec<&str> = line.splitn(4, ',').collect();
        if parts.len() != 4 {
            return Err(RcfError::Format(format!("bad manifest row {line:?}")));
        }
        let idx: usize = parts[2].parse().map_err(|_| RcfError::Format(format!("bad index in {line:?}")))?;
        if !slots.contains_key(parts[1]) {
            order.push(parts[1].to_string());
        }
        let s = slots.entry(parts[1].to_string()).or_default();
        let path = dir.join(parts[3]);
        let slot = match parts[0] {
            "frame" => &mut s.frames,
            "flow" => &mut s.flows,
            "backward_flow" => &mut s.backward,
            "features" => &mut s.features,
            "mask" => &mut s.masks,
            other => return Err(RcfError::Format(format!("unknown manifest entry kind {other:?}"))),
        };
        slot.insert(idx, path);
    }
    if order.is_empty() {
        return Err(RcfError::Config(format!("dataset at {} lists no sequences", dir.display())));
    }
    order
        .into_iter()
        .map(|name| {
            let s = &slots[&name];
            let t = s.frames.len();
            if t < 2 {
                return Err(RcfError::Format(format!("sequence {name} needs at least 2 frames")));
            }
            Ok(SequenceData {
                frames: dense(&name, "frames", &s.frames, t, |p| read_ppm(p))?,
                flows: dense(&name, "flows", &s.flows, t - 1, |p| read_flo(p))?,
                backward_flows: optional(&name, "backward flows", &s.backward, t - 1, |p| read_flo(p))?,
                features: optional(&name, "features", &s.features, t, |p| read_features(p))?,
                gt_masks: optional(&name, "masks", &s.masks, t, |p| read_pgm(p))?,
                name,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- commands

/// Binary predictions for every frame; with `crf`, one CRF pass before thresholding.
pub fn predict_sequences(model: &mut SegModel, channel: usize, seqs: &[SequenceData], crf: Option<&CrfParams>) -> Result<Vec<Vec<Mask>>> {
    seqs.iter()
        .map(|s| {
            s.frames
                .iter()
                .map(|f| {
                    let soft = predict_mask(model, f, channel)?;
                    let soft = Mask { data: soft.data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..soft };
                    let soft = match crf {
                        Some(p) => crf_refine(&soft, f, p)?,
                        None => soft,
                    };
                    Ok(soft.threshold(THRESHOLD))
                })
                .collect()
        })
        .collect()
}

pub fn evaluate_predictions(preds: &[Vec<Mask>], seqs: &[SequenceData]) -> Result<EvalResult> {
    let mut named = Vec::with_capacity(seqs.len());
    for (p, s) in preds.iter().zip(seqs) {
        let gt = s.gt_masks.as_ref().ok_or_else(|| RcfError::Config(format!("sequence {} has no ground-truth masks", s.name)))?;
        ensure_shape!(gt.len() == p.len(), "sequence {}: {} predictions for {} masks", s.name, p.len(), gt.len());
        let per = p.iter().zip(gt).map(|(a, b)| miou(a, b)).collect::<Result<Vec<_>>>()?;
        named.push((s.name.clone(), per));
    }
    Ok(EvalResult::from_frames(named))
}

/// Evaluates a checkpoint's object channel; `crf` adds the post-processing pass.
pub fn evaluate_checkpoint(ck: &Checkpoint, seqs: &[SequenceData], crf: Option<&CrfParams>) -> Result<EvalResult> {
    let channel = ck.object_channel.ok_or_else(|| RcfError::Config("checkpoint has no object channel".into()))?;
    let mut model = ck.model.clone();
    let preds = predict_sequences(&mut model, channel, seqs, crf)?;
    evaluate_predictions(&preds, seqs)
}

/// Object channel chosen on the first frame of every sequence.
pub fn choose_object_channel(ck: &mut Checkpoint, seqs: &[SequenceData]) -> Result<AlignmentReport> {
    let mut firsts = Vec::with_capacity(seqs.len());
    for s in seqs {
        let f = s.features.as_ref().ok_or_else(|| {
            RcfError::Config(format!("sequence {} has no features; object-channel selection needs them", s.name))
        })?;
        firsts.push((&s.frames[0], &f[0]));
    }
    let (c, report) = select_object_channel(&mut ck.model, &firsts)?;
    ck.object_channel = Some(c);
    Ok(report)
}

pub fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut s = String::from("stage,step,lr,loss,motion,appearance\n");
    for l in log {
        s += &format!("{},{},{},{},{},{}\n", l.stage, l.step, l.lr, l.loss, l.motion, l.appearance);
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let scenario = cfg.scenario.ok_or_else(|| RcfError::Config("synth needs --scenario NAME".into()))?;
    let seqs = cfg.load_sequences()?;
    let mut header = BTreeMap::new();
    header.insert("scenario".to_string(), scenario.to_string());
    header.insert("seed".to_string(), cfg.seed.to_string());
    header.insert("sequences".to_string(), seqs.len().to_string());
    header.insert("frames".to_string(), cfg.synth.frames.to_string());
    write_dataset(&cfg.out, &header, &seqs)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub eval: Option<EvalResult>,
}

/// Trains one model on already-loaded sequences (no files written).
pub fn train_on(train: &TrainConfig, crf: &CrfParams, stage: u8, seqs: &[SequenceData], log: &mut Vec<StepLog>) -> Result<Checkpoint> {
    let dataset = to_dataset(seqs);
    let mut ck = train_stage1_logged(&dataset, train, log)?;
    choose_object_channel(&mut ck, seqs)?;
    if stage >= 2 {
        ck = train_stage2_logged(&ck, &dataset, crf, log)?;
    }
    Ok(ck)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let seqs = cfg.load_sequences()?;
    fs::create_dir_all(&cfg.out)?;
    let mut log = Vec::new();
    let dataset = to_dataset(&seqs);
    let result = (|| -> Result<Checkpoint> {
        let mut ck = train_stage1_logged(&dataset, &cfg.train, &mut log)?;
        choose_object_channel(&mut ck, &seqs)?;
        ck.save(&cfg.out.join("stage1.rcfk"))?;
        if cfg.stage >= 2 {
            ck = train_stage2_logged(&ck, &dataset, &cfg.crf, &mut log)?;
            ck.save(&cfg.out.join("stage2.rcfk"))?;
        }
        Ok(ck)
    })();
    write_log(&cfg.out.join("train_log.csv"), &log)?;
    let checkpoint = result?;
    let eval = if seqs.iter().all(|s| s.gt_masks.is_some()) {
        let r = evaluate_checkpoint(&checkpoint, &seqs, None)?;
        println!("final mIoU: {:.4}", r.mean);
        Some(r)
    } else {
        None
    };
    Ok(TrainOutcome { checkpoint, log, eval })
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub report: AlignmentReport,
    pub checkpoints: Vec<Checkpoint>,
}

/// Trains every setting on the same data and picks one by alignment on all frames.
pub fn tune_on(cfg: &RunConfig, seqs: &[SequenceData]) -> Result<TuneOutcome> {
    let settings = if cfg.settings.is_empty() {
        (2..=6).map(|c| parse_setting(&format!("channels={c}"), &format!("channels={c}"))).collect::<Result<Vec<_>>>()?
    } else {
        cfg.settings.clone()
    };
    let mut features = Vec::new();
    for s in seqs {
        let f = s.features.as_ref().ok_or_else(|| RcfError::Config(format!("sequence {} has no features", s.name)))?;
        features.extend(f.iter().cloned());
    }
    let mut candidates = Vec::with_capacity(settings.len());
    let mut checkpoints = Vec::with_capacity(settings.len());
    for setting in &settings {
        let mut train = cfg.train.clone();
        for (k, v) in &setting.overrides {
            train.set(k, v)?;
        }
        let mut ck = train_on(&train, &cfg.crf, cfg.stage.min(1), seqs, &mut Vec::new())?;
        if let Some(c) = setting.channel {
            ensure_shape!(c < train.channels, "setting {}: channel {c} out of range", setting.name);
            ck.object_channel = Some(c);
        }
        let channel = ck.object_channel.expect("selected above");
        let mut model = ck.model.clone();
        let mut masks = Vec::new();
        for s in seqs {
            for f in &s.frames {
                masks.push(model.forward_masks(f)?.channel_mask(channel));
            }
        }
        candidates.push((setting.clone(), masks));
        checkpoints.push(ck);
    }
    let report = select_setting(&candidates, &features)?;
    Ok(TuneOutcome { report, checkpoints })
}

pub fn cmd_tune(cfg: &RunConfig) -> Result<TuneOutcome> {
    let seqs = cfg.load_sequences()?;
    let outcome = tune_on(cfg, &seqs)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("tune_report.txt"), outcome.report.to_text())?;
    fs::write(cfg.out.join("tune_report.csv"), outcome.report.to_csv())?;
    print!("{}", outcome.report.to_text());
    println!("chosen setting: {}", outcome.report.chosen_name());
    Ok(outcome)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| RcfError::Config("pass --checkpoint PATH".into()))?;
    if !path.is_file() {
        return Err(RcfError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalResult> {
    let ck = load_checkpoint(cfg)?;
    let seqs = cfg.load_sequences()?;
    let crf = cfg.crf_export.then_some(&cfg.crf);
    let r = evaluate_checkpoint(&ck, &seqs, crf)?;
    print!("{}", r.table());
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("eval.csv"), r.table())?;
    fs::write(cfg.out.join("eval_frames.csv"), r.frame_csv())?;
    Ok(r)
}

pub fn cmd_export(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ck = load_checkpoint(cfg)?;
    let channel = ck.object_channel.ok_or_else(|| RcfError::Config("checkpoint has no object channel".into()))?;
    let seqs = cfg.load_sequences()?;
    let mut model = ck.model.clone();
    let preds = predict_sequences(&mut model, channel, &seqs, cfg.crf_export.then_some(&cfg.crf))?;
    let mut written = Vec::new();
    for (s, masks) in seqs.iter().zip(&preds) {
        let dir = cfg.out.join(&s.name);
        fs::create_dir_all(&dir)?;
        for (i, m) in masks.iter().enumerate() {
            let p = dir.join(format!("pred_{i:03}.pgm"));
            write_pgm(m, &p)?;
            written.push(p);
        }
    }
    println!("wrote {} masks to {}", written.len(), cfg.out.display());
    Ok(written)
}

// ---------------------------------------------------------------- argument parsing

#[derive(Parser, Debug)]
#[command(name = "rcf", version, about = "Unsupervised video object segmentation from optical flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(Flags),
    /// Train (stage 1, and stage 2 unless `--stage 1`).
    Train(Flags),
    /// Pick among settings by motion-appearance alignment.
    Tune(Flags),
    /// Score a checkpoint against ground-truth masks.
    Eval(Flags),
    /// Write predicted masks.
    Export(Flags),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Flags {
    /// Flat `section.key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: Option<u8>,
    /// Apply a CRF pass to predictions (eval/export).
    #[arg(long)]
    pub crf: bool,
    /// rigid | articulated | reflection | static_object
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Residual bound in pixels.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Dataset directory containing a manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn exit_code(e: &RcfError) -> i32 {
    match e {
        RcfError::Config(_) => 2,
        _ => 1,
    }
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (flags, f): (&Flags, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Synth(fl) => (fl, |c| cmd_synth(c).map(|_| ())),
        Command::Train(fl) => (fl, |c| cmd_train(c).map(|_| ())),
        Command::Tune(fl) => (fl, |c| cmd_tune(c).map(|_| ())),
        Command::Eval(fl) => (fl, |c| cmd_eval(c).map(|_| ())),
        Command::Export(fl) => (fl, |c| cmd_export(c).map(|_| ())),
    };
    match RunConfig::resolve(flags).and_then(|cfg| f(&cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
