//! Label-free selection of settings and of the object channel by how well a
//! predicted mask agrees with an appearance affinity (negative normalized cut).

use crate::datagen::{FeatureMap, Frame, Mask};
use crate::error::{RcfError, Result};
use crate::model::SegModel;
use crate::refine::{affinity, ncut_value, AffinityMatrix, AFFINITY_TAU};

/// `-NCut` of the mask (resized to the feature grid) against the given affinity.
pub fn alignment_score_with(a: &AffinityMatrix, mask: &Mask, grid: (usize, usize)) -> Result<f64> {
    let x: Vec<f64> = mask.resized(grid.0, grid.1).data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(-ncut_value(a, &x)?)
}

/// Motion-appearance alignment of a soft mask; in `[-2, 0]`, higher is better.
pub fn alignment_score(mask: &Mask, features: &FeatureMap) -> Result<f64> {
    let a = affinity(features, AFFINITY_TAU)?;
    alignment_score_with(&a, mask, (features.height, features.width))
}

/// A candidate configuration: config overrides and/or an object-channel index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Setting {
    pub name: String,
    pub overrides: Vec<(String, String)>,
    pub channel: Option<usize>,
}

impl Setting {
    pub fn named(name: impl Into<String>) -> Self {
        Self { name: name.into(), ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettingScore {
    pub name: String,
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub settings: Vec<SettingScore>,
    pub chosen: usize,
}

impl AlignmentReport {
    pub fn chosen_name(&self) -> &str {
        &self.settings[self.chosen].name
    }

    /// One human-readable record per setting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.settings.iter().enumerate() {
            let frames: Vec<String> = r.per_frame.iter().map(|v| format!("{v:.6}")).collect();
            let mark = if i == self.chosen { " *" } else { "" };
            s += &format!("{}: mean {:.6} frames [{}]{mark}\n", r.name, r.mean, frames.join(", "));
        }
        s
    }

    /// `setting,mean,frame_0,...` with a header row.
    pub fn to_csv(&self) -> String {
        let n = self.settings.iter().map(|r| r.per_frame.len()).max().unwrap_or(0);
        let mut s = String::from("setting,mean,chosen");
        for i in 0..n {
            s += &format!(",frame_{i}");
        }
        s.push('\n');
        for (i, r) in self.settings.iter().enumerate() {
            s += &format!("{},{},{}", r.name, r.mean, i == self.chosen);
            for v in &r.per_frame {
                s += &format!(",{v}");
            }
            s.push('\n');
        }
        s
    }
}

fn argmax_lowest(means: &[f64]) -> usize {
    let mut best = 0;
    for (i, &m) in means.iter().enumerate() {
        if m > means[best] {
            best = i;
        }
    }
    best
}

/// Scores each candidate's predicted masks on the evaluation frames and picks the
/// highest mean score (ties go to the earliest candidate).
pub fn select_setting(candidates: &[(Setting, Vec<Mask>)], features: &[FeatureMap]) -> Result<AlignmentReport> {
    if candidates.is_empty() {
        return Err(RcfError::Config("no settings to select from".into()));
    }
    let affinities = features.iter().map(|f| affinity(f, AFFINITY_TAU)).collect::<Result<Vec<_>>>()?;
    let mut settings = Vec::with_capacity(candidates.len());
    for (setting, masks) in candidates {
        if masks.len() != features.len() {
            return Err(RcfError::Shape(format!(
                "setting {} has {} masks for {} evaluation frames",
                setting.name,
                masks.len(),
                features.len()
            )));
        }
        let per_frame = masks
            .iter()
            .zip(features.iter().zip(&affinities))
            .map(|(m, (f, a))| alignment_score_with(a, m, (f.height, f.width)))
            .collect::<Result<Vec<_>>>()?;
        let mean = if per_frame.is_empty() { 0.0 } else { per_frame.iter().sum::<f64>() / per_frame.len() as f64 };
        settings.push(SettingScore { name: setting.name.clone(), per_frame, mean });
    }
    let chosen = argmax_lowest(&settings.iter().map(|s| s.mean).collect::<Vec<_>>());
    Ok(AlignmentReport { settings, chosen })
}

/// Picks the channel whose masks best align with appearance on the given frames
/// (typically the first frame of every sequence). Ties go to the lowest index;
/// a channel and its exact complement always tie.
pub fn select_object_channel(model: &mut SegModel, frames: &[(&Frame, &FeatureMap)]) -> Result<(usize, AlignmentReport)> {
    let c = model.shape.channels;
    let mut per_channel: Vec<Vec<Mask>> = vec![Vec::with_capacity(frames.len()); c];
    for (frame, _) in frames {
        let masks = model.forward_masks(frame)?;
        for (ch, out) in per_channel.iter_mut().enumerate() {
            out.push(masks.channel_mask(ch));
        }
    }
    let candidates: Vec<(Setting, Vec<Mask>)> = per_channel
        .into_iter()
        .enumerate()
        .map(|(ch, masks)| (Setting { name: format!("channel_{ch}"), channel: Some(ch), ..Default::default() }, masks))
        .collect();
    let features: Vec<FeatureMap> = frames.iter().map(|(_, f)| (*f).clone()).collect();
    let report = select_setting(&candidates, &features)?;
    Ok((report.chosen, report))
}
