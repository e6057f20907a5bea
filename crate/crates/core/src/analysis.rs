//! Unit introspection: temporal entropy, occlusion discrepancy maps,
//! ranking overlap with external detectors and patch IoU.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use rayon::prelude::*;

use crate::dates::{BinIndex, TemporalBinning};
use crate::error::{Error, Result};
use crate::ingest::ImageTensor;
use crate::net::{argmax, MicroNet};

/// Unit x sample activations of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTable {
    layer: String,
    n_units: usize,
    n_samples: usize,
    /// Unit-major.
    values: Vec<f64>,
}

impl ActivationTable {
    /// `rows[s][u]` is the activation of unit `u` on sample `s`.
    pub fn from_sample_rows(layer: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n_samples = rows.len();
        let n_units = rows.first().map_or(0, Vec::len);
        let mut values = vec![0.0; n_units * n_samples];
        for (s, row) in rows.iter().enumerate() {
            if row.len() != n_units {
                return Err(Error::ShapeMismatch(format!(
                    "sample {s} has {} units, expected {n_units}",
                    row.len()
                )));
            }
            for (u, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue {
                        index: s * n_units + u,
                    });
                }
                values[u * n_samples + s] = v;
            }
        }
        Ok(ActivationTable {
            layer: layer.into(),
            n_units,
            n_samples,
            values,
        })
    }

    /// Per-unit activations of `layer` (spatial maximum for conv-shaped
    /// layers) on every image.
    pub fn from_net(net: &MicroNet, images: &[ImageTensor], layer: &str) -> Result<Self> {
        net.layer_index(layer)?;
        let rows: Vec<Vec<f64>> = images
            .par_iter()
            .map(|img| net.unit_activations(img, layer))
            .collect::<Result<_>>()?;
        Self::from_sample_rows(layer, &rows)
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn unit(&self, u: usize) -> Result<&[f64]> {
        if u >= self.n_units {
            return Err(Error::UnitOutOfRange {
                unit: u,
                n_units: self.n_units,
            });
        }
        Ok(&self.values[u * self.n_samples..(u + 1) * self.n_samples])
    }
}

/// Indices of the `n` largest scores, descending; ties keep index order.
pub fn top_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps earlier samples first among equals
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(n);
    idx
}

/// Samples ranked by the activation of `unit`, top `n` only.
pub fn rank_by_activation(table: &ActivationTable, unit: usize, n: usize) -> Result<Vec<usize>> {
    let acts = table.unit(unit)?;
    if n > table.n_samples {
        return Err(Error::InvalidConfig(format!(
            "top-{n} requested from {} samples",
            table.n_samples
        )));
    }
    Ok(top_indices(acts, n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalHistogram {
    counts: Vec<u64>,
    binning: TemporalBinning,
}

impl TemporalHistogram {
    pub fn new(counts: Vec<u64>, binning: TemporalBinning) -> Result<Self> {
        if counts.len() != binning.n_bins() {
            return Err(Error::ShapeMismatch(format!(
                "{} counts for {} bins",
                counts.len(),
                binning.n_bins()
            )));
        }
        Ok(TemporalHistogram { counts, binning })
    }

    /// Histogram of the labels of the selected samples.
    pub fn from_samples(
        samples: &[usize],
        labels: &[BinIndex],
        binning: &TemporalBinning,
    ) -> Result<Self> {
        let mut counts = vec![0u64; binning.n_bins()];
        for &s in samples {
            let bin = labels.get(s).ok_or_else(|| {
                Error::ShapeMismatch(format!("sample {s} has no label ({} labels)", labels.len()))
            })?;
            counts[binning.check(*bin)?.0] += 1;
        }
        Self::new(counts, *binning)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn binning(&self) -> &TemporalBinning {
        &self.binning
    }
}

/// Shannon entropy in bits of the normalised histogram.
pub fn temporal_entropy(hist: &TemporalHistogram) -> Result<f64> {
    entropy_of_counts(&hist.counts)
}

fn entropy_of_counts(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let t = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.log2()
        })
        .sum();
    // -0.0 for a point mass
    Ok(h.max(0.0))
}

/// Per-unit entropies and their aggregate histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub entropies: Vec<f64>,
    /// `n_edges - 1` equal-width bins covering `[0, log2 n_bins]`; the last
    /// bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl EntropyReport {
    pub fn count_below(&self, threshold: f64) -> usize {
        self.entropies.iter().filter(|&&e| e < threshold).count()
    }
}

/// Default number of bins of the aggregate entropy histogram.
pub const ENTROPY_HIST_BINS: usize = 10;

pub fn entropy_histogram(
    table: &ActivationTable,
    labels: &[BinIndex],
    binning: &TemporalBinning,
    top_n: usize,
    hist_bins: usize,
) -> Result<EntropyReport> {
    if labels.len() != table.n_samples {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: table.n_samples,
        });
    }
    if hist_bins == 0 {
        return Err(Error::InvalidConfig(
            "entropy histogram needs at least one bin".into(),
        ));
    }
    let entropies = (0..table.n_units)
        .map(|u| {
            let top = rank_by_activation(table, u, top_n)?;
            temporal_entropy(&TemporalHistogram::from_samples(&top, labels, binning)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = (binning.n_bins() as f64).log2();
    let edges: Vec<f64> = (0..=hist_bins)
        .map(|i| max * i as f64 / hist_bins as f64)
        .collect();
    let mut counts = vec![0; hist_bins];
    for &e in &entropies {
        let k = if max > 0.0 {
            ((e / max * hist_bins as f64) as usize).min(hist_bins - 1)
        } else {
            0
        };
        counts[k] += 1;
    }
    Ok(EntropyReport {
        entropies,
        edges,
        counts,
    })
}

/// Axis-aligned pixel box, top-left corner `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PatchBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        PatchBox { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &PatchBox, b: &PatchBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w).saturating_sub(a.x.max(b.x));
    let iy = (a.y + a.h).min(b.y + b.h).saturating_sub(a.y.max(b.y));
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionConfig {
    pub occluder_size: usize,
    pub stride: usize,
    pub fill_value: f64,
    /// Fill with the image mean instead of `fill_value`.
    pub mean_fill: bool,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            occluder_size: 11,
            stride: 3,
            fill_value: 0.0,
            mean_fill: false,
        }
    }
}

/// Row-major occluder placements.
pub fn occlusion_grid(height: usize, width: usize, cfg: &OcclusionConfig) -> Result<Vec<PatchBox>> {
    let (rows, cols) = grid_dims(height, width, cfg)?;
    let (occ, s) = (cfg.occluder_size, cfg.stride);
    Ok((0..rows)
        .flat_map(|r| (0..cols).map(move |c| PatchBox::new(c * s, r * s, occ, occ)))
        .collect())
}

fn grid_dims(height: usize, width: usize, cfg: &OcclusionConfig) -> Result<(usize, usize)> {
    if cfg.occluder_size == 0 || cfg.stride == 0 {
        return Err(Error::InvalidConfig(
            "occluder size and stride must be positive".into(),
        ));
    }
    if cfg.occluder_size > height || cfg.occluder_size > width {
        return Err(Error::OccluderTooLarge {
            occluder: cfg.occluder_size,
            height,
            width,
        });
    }
    let n = |d: usize| (d - cfg.occluder_size) / cfg.stride + 1;
    Ok((n(height), n(width)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyMap {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub occluder_size: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major, one value per placement.
    pub values: Vec<f64>,
}

impl DiscrepancyMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn placement(&self, r: usize, c: usize) -> PatchBox {
        PatchBox::new(
            c * self.stride,
            r * self.stride,
            self.occluder_size,
            self.occluder_size,
        )
    }

    /// Pixel-resolution map: every cell's value painted over its occluder
    /// footprint, overlaps resolved by maximum, uncovered pixels 0.
    pub fn upsample(&self) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.height * self.width];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = self.get(r, c);
                let b = self.placement(r, c);
                for y in b.y..b.y + b.h {
                    for p in &mut out[y * self.width + b.x..y * self.width + b.x + b.w] {
                        *p = p.max(v);
                    }
                }
            }
        }
        for p in &mut out {
            if *p == f64::NEG_INFINITY {
                *p = 0.0;
            }
        }
        out
    }
}

/// `map[k] = score(img) - score(img with box k filled)`, evaluated in
/// parallel over placements.
pub fn discrepancy_map<F>(
    score: F,
    img: &ImageTensor,
    cfg: &OcclusionConfig,
) -> Result<DiscrepancyMap>
where
    F: Fn(&ImageTensor) -> Result<f64> + Sync,
{
    let (rows, cols) = grid_dims(img.height(), img.width(), cfg)?;
    let boxes = occlusion_grid(img.height(), img.width(), cfg)?;
    let fill = if cfg.mean_fill {
        img.mean()
    } else {
        cfg.fill_value
    };
    let base = score(img)?;
    let values = boxes
        .par_iter()
        .map(|b| {
            let mut occluded = img.clone();
            occluded.fill_box(b.x, b.y, b.w, b.h, fill);
            score(&occluded).map(|s| base - s)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DiscrepancyMap {
        rows,
        cols,
        stride: cfg.stride,
        occluder_size: cfg.occluder_size,
        height: img.height(),
        width: img.width(),
        values,
    })
}

/// Default side of a maximum-activation patch.
pub const DEFAULT_PATCH: usize = 80;

/// The `patch_h x patch_w` box with the largest sum of the upsampled map;
/// ties go to the smallest `(y, x)`.
pub fn max_activation_patch(
    map: &DiscrepancyMap,
    patch_h: usize,
    patch_w: usize,
) -> Result<PatchBox> {
    let (h, w) = (map.height, map.width);
    if patch_h == 0 || patch_w == 0 || patch_h > h || patch_w > w {
        return Err(Error::PatchTooLarge {
            patch_h,
            patch_w,
            height: h,
            width: w,
        });
    }
    let px = map.upsample();
    let mut best: Option<(f64, PatchBox)> = None;
    let mut col = vec![0.0; w];
    for y in 0..=h - patch_h {
        // recomputed from scratch so equal boxes give bit-equal sums
        for (x, c) in col.iter_mut().enumerate() {
            *c = (y..y + patch_h).map(|yy| px[yy * w + x]).sum();
        }
        for x in 0..=w - patch_w {
            let s: f64 = col[x..x + patch_w].iter().sum();
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, PatchBox::new(x, y, patch_w, patch_h)));
            }
        }
    }
    Ok(best.expect("at least one placement").1)
}

/// Overlap of the top-`n` sets of two rankings of the same universe,
/// `n = max(1, round(fraction * universe))`.
pub fn correlation(
    unit_ranking: &[usize],
    detector_ranking: &[usize],
    fraction: f64,
) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let a: HashSet<usize> = unit_ranking.iter().copied().collect();
    let b: HashSet<usize> = detector_ranking.iter().copied().collect();
    if a.len() != unit_ranking.len() || b.len() != detector_ranking.len() {
        return Err(Error::UniverseMismatch(
            "ranking contains duplicates".into(),
        ));
    }
    if a != b {
        return Err(Error::UniverseMismatch(format!(
            "rankings cover {} and {} samples with different members",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Empty("ranking"));
    }
    let n = ((fraction * a.len() as f64).round() as usize).clamp(1, a.len());
    let top: HashSet<usize> = unit_ranking[..n].iter().copied().collect();
    let shared = detector_ranking[..n]
        .iter()
        .filter(|s| top.contains(s))
        .count();
    Ok(shared as f64 / n as f64)
}

/// Units feeding the classification head ranked by their contribution
/// `weight[pred][u] * activation[u]` to the predicted class's logit; the top
/// `n` (ties to the lower unit) with their contributions.
pub fn top_contributing_units(
    net: &MicroNet,
    img: &ImageTensor,
    n: usize,
) -> Result<Vec<(usize, f64)>> {
    let head = net.head_index()?;
    let trace = net.trace(img)?;
    let pred = argmax(trace.last().expect("non-empty net"));
    let input: &[f64] = if head == 0 {
        img.values()
    } else {
        &trace[head - 1]
    };
    let layer = &net.layers()[head];
    let k = input.len();
    let w = &layer.weights()[pred * k..(pred + 1) * k];
    let contrib: Vec<f64> = w.iter().zip(input).map(|(a, b)| a * b).collect();
    Ok(top_indices(&contrib, n)
        .into_iter()
        .map(|u| (u, contrib[u]))
        .collect())
}

/// One line of a detector file.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorRecord {
    pub detector_id: String,
    pub sample_id: String,
    pub confidence: f64,
    pub patch: PatchBox,
}

/// Parse `detector_id, sample_id, confidence, x, y, w, h` lines. Blank lines
/// and `#` comments are skipped; a file without records is an error.
pub fn read_detectors<R: BufRead>(reader: R) -> Result<Vec<DetectorRecord>> {
    let mut out = Vec::new();
    let mut last_line = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let bad = |reason: String| Error::MalformedRecord {
            what: "detector record",
            line: line_no,
            reason,
        };
        let line = line.map_err(|e| bad(e.to_string()))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let confidence: f64 = f[2]
            .parse()
            .map_err(|_| bad(format!("bad confidence {:?}", f[2])))?;
        if !confidence.is_finite() {
            return Err(bad("non-finite confidence".into()));
        }
        let mut nums = [0usize; 4];
        for (k, v) in nums.iter_mut().enumerate() {
            *v = f[3 + k]
                .parse()
                .map_err(|_| bad(format!("bad box field {:?}", f[3 + k])))?;
        }
        if nums[2] == 0 || nums[3] == 0 {
            return Err(bad("empty box".into()));
        }
        if f[0].is_empty() || f[1].is_empty() {
            return Err(bad("empty id".into()));
        }
        out.push(DetectorRecord {
            detector_id: f[0].to_string(),
            sample_id: f[1].to_string(),
            confidence,
            patch: PatchBox::new(nums[0], nums[1], nums[2], nums[3]),
        });
    }
    if out.is_empty() {
        return Err(Error::MalformedRecord {
            what: "detector file",
            line: last_line + 1,
            reason: "no detector records".into(),
        });
    }
    Ok(out)
}

/// Detections of one detector keyed by sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub id: String,
    /// Highest confidence and its box per sample.
    pub hits: BTreeMap<usize, (f64, PatchBox)>,
}

impl Detector {
    /// All `n_samples` indices ranked by confidence; samples without a
    /// detection come last. Ties keep sample order.
    pub fn ranking(&self, n_samples: usize) -> Vec<usize> {
        let scores: Vec<f64> = (0..n_samples)
            .map(|s| self.hits.get(&s).map_or(f64::NEG_INFINITY, |h| h.0))
            .collect();
        top_indices(&scores, n_samples)
    }
}

/// Group records by detector (first-appearance order), resolving sample ids
/// through `index`. Records for unknown samples are an error.
pub fn group_detectors(
    records: &[DetectorRecord],
    index: &HashMap<String, usize>,
) -> Result<Vec<Detector>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Detector> = HashMap::new();
    for r in records {
        let s = *index.get(&r.sample_id).ok_or_else(|| {
            Error::UniverseMismatch(format!("detector sample {:?} not in manifest", r.sample_id))
        })?;
        let d = by_id.entry(r.detector_id.clone()).or_insert_with(|| {
            order.push(r.detector_id.clone());
            Detector {
                id: r.detector_id.clone(),
                hits: BTreeMap::new(),
            }
        });
        let e = d.hits.entry(s).or_insert((r.confidence, r.patch));
        if r.confidence > e.0 {
            *e = (r.confidence, r.patch);
        }
    }
    Ok(order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("grouped"))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationConfig {
    pub fraction: f64,
    pub units_per_detector: usize,
    pub images_per_unit: usize,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig {
            fraction: 0.3,
            units_per_detector: 5,
            images_per_unit: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitMatch {
    pub unit: usize,
    pub correlation: f64,
    /// IoUs against the detector box on the unit's top images that the
    /// detector fired on.
    pub ious: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorReport {
    pub detector: String,
    pub units: Vec<UnitMatch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSummary {
    pub mean_correlation: f64,
    /// NaN when no IoU could be computed.
    pub mean_iou: f64,
    pub n_ious: usize,
    pub frac_iou_below_01: f64,
    pub frac_iou_at_least_05: f64,
}

/// For every detector: the units with the highest `correlation` (ties to
/// the lower unit), and for each the IoU between its maximum-activation
/// patch and the detector's box on its top images. `patch_of(unit, sample)`
/// supplies the unit's patch on a sample.
pub fn correlation_report<P>(
    table: &ActivationTable,
    detectors: &[Detector],
    cfg: &CorrelationConfig,
    patch_of: P,
) -> Result<(Vec<DetectorReport>, CorrelationSummary)>
where
    P: Fn(usize, usize) -> Result<PatchBox> + Sync,
{
    let n = table.n_samples();
    let unit_rankings: Vec<Vec<usize>> = (0..table.n_units())
        .map(|u| rank_by_activation(table, u, n))
        .collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(detectors.len());
    for d in detectors {
        let dr = d.ranking(n);
        let cs: Vec<f64> = unit_rankings
            .iter()
            .map(|ur| correlation(ur, &dr, cfg.fraction))
            .collect::<Result<_>>()?;
        let units = top_indices(&cs, cfg.units_per_detector)
            .into_par_iter()
            .map(|u| {
                let ious = unit_rankings[u]
                    .iter()
                    .take(cfg.images_per_unit)
                    .filter_map(|s| d.hits.get(s).map(|h| (*s, h.1)))
                    .map(|(s, dbox)| patch_of(u, s).map(|p| iou(&p, &dbox)))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(UnitMatch {
                    unit: u,
                    correlation: cs[u],
                    ious,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        reports.push(DetectorReport {
            detector: d.id.clone(),
            units,
        });
    }
    let cs: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.units.iter().map(|u| u.correlation))
        .collect();
    let ious: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.units.iter().flat_map(|u| u.ious.iter().copied()))
        .collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let frac = |pred: &dyn Fn(f64) -> bool| {
        if ious.is_empty() {
            f64::NAN
        } else {
            ious.iter().filter(|&&v| pred(v)).count() as f64 / ious.len() as f64
        }
    };
    let summary = CorrelationSummary {
        mean_correlation: mean(&cs),
        mean_iou: mean(&ious),
        n_ious: ious.len(),
        frac_iou_below_01: frac(&|v| v < 0.1),
        frac_iou_at_least_05: frac(&|v| v >= 0.5),
    };
    Ok((reports, summary))
}
