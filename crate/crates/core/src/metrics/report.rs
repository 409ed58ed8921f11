use std::fmt::Write as _;

use super::consistency::{
    detect_scene_cuts, dynamic_degree, flow_strength, mawe_from, warp_error, Mawe, MAWE_C,
};
use super::flow::{estimate_video_flows, FlowField, FlowParams};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::patchio::VideoTensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricParams {
    pub flow: FlowParams,
    pub c: f64,
    pub scene_threshold: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            flow: FlowParams::default(),
            c: MAWE_C,
            scene_threshold: 3.0,
        }
    }
}

/// Per-video consistency metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub frames: usize,
    /// `None` when every pair is fully masked or there are no pairs.
    pub warp_error: Option<f64>,
    pub flow_strength: f64,
    pub mawe: Mawe,
    pub scene_cut_count: usize,
    pub scene_cut_rate: f64,
    pub dynamic_degree: f64,
    /// Per pair: warp error (−1 when masked), flow strength, mean absolute difference.
    pub series: Vec<[f64; 3]>,
}

/// Keys of the text serialization, in file order.
pub const REPORT_KEYS: [&str; 7] = [
    "frames",
    "warp_error",
    "flow_strength",
    "mawe",
    "scene_cut_count",
    "scene_cut_rate",
    "dynamic_degree",
];

fn pair_strength(flow: &FlowField) -> f64 {
    flow_strength(std::slice::from_ref(flow))
}

/// Metrics for `v` against the supplied per-pair flows.
pub fn report_with_flows(v: &VideoTensor, flows: &[FlowField], p: MetricParams) -> Result<MetricReport> {
    let warp = match warp_error(v, flows) {
        Ok(w) => Some(w),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let ofs = flow_strength(flows);
    let m = match &warp {
        Some(w) => mawe_from(w.value, ofs, p.c)?,
        None => Mawe::Undefined,
    };
    let cuts = detect_scene_cuts(v, p.scene_threshold)?;
    let series = flows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let w = warp.as_ref().and_then(|w| w.per_pair[i]).unwrap_or(-1.0);
            [w, pair_strength(f), cuts.diffs[i]]
        })
        .collect();
    Ok(MetricReport {
        frames: v.frames,
        warp_error: warp.map(|w| w.value),
        flow_strength: ofs,
        mawe: m,
        scene_cut_count: cuts.count,
        scene_cut_rate: cuts.rate,
        dynamic_degree: dynamic_degree(flows),
        series,
    })
}

/// Metrics for `v` with block-matched flow.
pub fn evaluate_video(v: &VideoTensor, p: MetricParams, exec: Execution) -> Result<MetricReport> {
    let flows = estimate_video_flows(v, p.flow, exec)?;
    report_with_flows(v, &flows, p)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:?}"))
}

fn parse_opt(key: &str, s: &str) -> Result<Option<f64>> {
    if s == "undefined" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad value for {key}: {s:?}")))
}

impl MetricReport {
    /// Flat `key = value` text; undefined values are written as `undefined`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let vals = [
            self.frames.to_string(),
            fmt_opt(self.warp_error),
            format!("{:?}", self.flow_strength),
            self.mawe.to_string(),
            self.scene_cut_count.to_string(),
            format!("{:?}", self.scene_cut_rate),
            format!("{:?}", self.dynamic_degree),
        ];
        for (k, v) in REPORT_KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses the scalar fields written by [`MetricReport::to_text`]; the series is left empty.
    pub fn from_text(text: &str) -> Result<MetricReport> {
        let mut map = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key = value, got {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Format(format!("missing key {k}")));
        let num = |k: &str| -> Result<f64> {
            parse_opt(k, get(k)?)?.ok_or_else(|| Error::Format(format!("{k} is undefined")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad integer for {k}")))
        };
        Ok(MetricReport {
            frames: int("frames")?,
            warp_error: parse_opt("warp_error", get("warp_error")?)?,
            flow_strength: num("flow_strength")?,
            mawe: parse_opt("mawe", get("mawe")?)?.map_or(Mawe::Undefined, Mawe::Value),
            scene_cut_count: int("scene_cut_count")?,
            scene_cut_rate: num("scene_cut_rate")?,
            dynamic_degree: num("dynamic_degree")?,
            series: Vec::new(),
        })
    }

    /// Per-pair series as a `1×1×pairs×3` video tensor.
    pub fn series_tensor(&self) -> Result<Option<VideoTensor>> {
        if self.series.is_empty() {
            return Ok(None);
        }
        let values = self.series.iter().flatten().copied().collect();
        VideoTensor::new(1, 1, self.series.len(), 3, 1.0, values).map(Some)
    }
}

/// Means across videos; undefined MAWE rows are skipped and counted.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub videos: usize,
    pub mean_warp_error: Option<f64>,
    pub mean_flow_strength: f64,
    pub mean_mawe: Option<f64>,
    pub undefined_mawe: usize,
    pub mean_scene_cut_rate: f64,
    pub mean_dynamic_degree: f64,
}

pub fn aggregate(reports: &[MetricReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Contract("aggregate of no reports".into()));
    }
    let n = reports.len() as f64;
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let mawes: Vec<f64> = reports.iter().filter_map(|r| r.mawe.value()).collect();
    Ok(AggregateReport {
        videos: reports.len(),
        mean_warp_error: mean(reports.iter().filter_map(|r| r.warp_error).collect()),
        mean_flow_strength: reports.iter().map(|r| r.flow_strength).sum::<f64>() / n,
        undefined_mawe: reports.len() - mawes.len(),
        mean_mawe: mean(mawes),
        mean_scene_cut_rate: reports.iter().map(|r| r.scene_cut_rate).sum::<f64>() / n,
        mean_dynamic_degree: reports.iter().map(|r| r.dynamic_degree).sum::<f64>() / n,
    })
}

impl AggregateReport {
    pub fn to_text(&self) -> String {
        format!(
            "videos = {}\nmean_warp_error = {}\nmean_flow_strength = {:?}\nmean_mawe = {}\nundefined_mawe = {}\nmean_scene_cut_rate = {:?}\nmean_dynamic_degree = {:?}\n",
            self.videos,
            fmt_opt(self.mean_warp_error),
            self.mean_flow_strength,
            fmt_opt(self.mean_mawe),
            self.undefined_mawe,
            self.mean_scene_cut_rate,
            self.mean_dynamic_degree
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchio::{static_clip, textured_translation};

    #[test]
    fn text_round_trip() {
        let clip = textured_translation(16, 16, 4, 1, (1, 0), 2).unwrap();
        let r = report_with_flows(&clip.video, &clip.flows, MetricParams::default()).unwrap();
        let back = MetricReport::from_text(&r.to_text()).unwrap();
        assert_eq!(back.to_text(), r.to_text());
        assert_eq!(back.flow_strength, r.flow_strength);
        let s = r.series_tensor().unwrap().unwrap();
        assert_eq!(s.dims(), [1, 1, 3, 3]);
    }

    #[test]
    fn static_clip_report_carries_sentinel() {
        let clip = static_clip(8, 8, 4, 1, 0.0);
        let r = evaluate_video(&clip.video, MetricParams::default(), Execution::Sequential).unwrap();
        assert_eq!(r.warp_error, Some(0.0));
        assert_eq!(r.flow_strength, 0.0);
        assert_eq!(r.mawe, Mawe::Undefined);
        assert!(r.to_text().contains("mawe = undefined"));
    }

    #[test]
    fn aggregate_skips_undefined_mawe() {
        let a = report_with_flows(
            &textured_translation(16, 16, 3, 1, (1, 0), 2).unwrap().video,
            &textured_translation(16, 16, 3, 1, (1, 0), 2).unwrap().flows,
            MetricParams::default(),
        )
        .unwrap();
        let s = static_clip(16, 16, 3, 1, 0.0);
        let b = report_with_flows(&s.video, &s.flows, MetricParams::default()).unwrap();
        let agg = aggregate(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(agg.undefined_mawe, 1);
        assert_eq!(agg.mean_mawe, a.mawe.value());
        assert_eq!(agg.mean_flow_strength, (a.flow_strength + b.flow_strength) / 2.0);
    }
}
