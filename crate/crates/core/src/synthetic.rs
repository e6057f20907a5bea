//! Planted synthetic data for end-to-end checks.
//!
//! Every image is low-contrast noise with one small grating patch at a
//! random position. In the target task the grating's orientation and period
//! encode the decade of the label year; the planted box is known exactly.
//! The source task uses the same generator with a disjoint set of gratings
//! (orientations rotated by half a step), so a net trained on it learns
//! related but not identical features.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    discrepancy_map, entropy_histogram, iou, max_activation_patch, ActivationTable,
    OcclusionConfig, PatchBox, ENTROPY_HIST_BINS,
};
use crate::dates::{BinIndex, TemporalBinning};
use crate::error::{Error, Result};
use crate::ingest::{ImageTensor, Split};
use crate::linear::{evaluate_mae, predict_year_svm, train_svm, TrainConfig};
use crate::net::{architecture, argmax, train, MicroNet, SgdConfig, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub box_size: usize,
    pub binning: TemporalBinning,
    /// Amplitude of the uniform background noise around 0.5.
    pub noise: f64,
    /// Grating amplitude around 0.5.
    pub contrast: f64,
    /// Box corners are multiples of this many pixels.
    pub position_step: usize,
    /// Every `test_every`-th sample is held out.
    pub test_every: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_samples: 2200,
            image_size: 20,
            box_size: 8,
            binning: TemporalBinning::default(),
            noise: 0.1,
            contrast: 0.45,
            position_step: 1,
            test_every: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSample {
    pub image: ImageTensor,
    pub year: i32,
    pub label: BinIndex,
    pub planted: PatchBox,
    pub split: Split,
}

/// Orientation (radians) and period (pixels) of grating `k` of a family.
///
/// Gratings cycle through six orientations 30 degrees apart, first with a
/// short period, then a long one. The source family is offset by 15
/// degrees.
pub fn grating(k: usize, source: bool) -> (f64, f64) {
    let step = PI / 6.0;
    let offset = if source { step / 2.0 } else { 0.0 };
    let theta = offset + step * (k % 6) as f64;
    let period = if (k / 6).is_multiple_of(2) { 3.0 } else { 6.0 };
    (theta, period)
}

fn render(
    cfg: &PlantedConfig,
    class: usize,
    source: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, PatchBox)> {
    let (s, b) = (cfg.image_size, cfg.box_size);
    if b == 0 || b > s {
        return Err(Error::InvalidConfig(format!(
            "box {b} does not fit image {s}"
        )));
    }
    let mut img = ImageTensor::filled(s, s, 1, 0.5)?;
    for y in 0..s {
        for x in 0..s {
            img.set(0, y, x, 0.5 + cfg.noise * (2.0 * rng.random::<f64>() - 1.0));
        }
    }
    let step = cfg.position_step.max(1);
    let bx = step * rng.random_range(0..=(s - b) / step);
    let by = step * rng.random_range(0..=(s - b) / step);
    let (theta, period) = grating(class, source);
    let phase = rng.random::<f64>() * 2.0 * PI;
    let (c, sn) = (theta.cos(), theta.sin());
    for y in 0..b {
        for x in 0..b {
            let t = (x as f64 * c + y as f64 * sn) * 2.0 * PI / period + phase;
            img.set(0, by + y, bx + x, 0.5 + cfg.contrast * t.cos());
        }
    }
    Ok((img, PatchBox::new(bx, by, b, b)))
}

/// Target task: label year uniform within its decade, decade encoded by the
/// planted grating. Samples cycle through the decades so classes are
/// balanced.
pub fn planted_dataset(cfg: &PlantedConfig) -> Result<Vec<PlantedSample>> {
    let n_bins = cfg.binning.n_bins();
    if n_bins > 12 {
        return Err(Error::InvalidConfig("at most 12 planted gratings".into()));
    }
    if cfg.test_every < 2 {
        return Err(Error::InvalidConfig("test_every must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_samples)
        .map(|i| {
            let class = i % n_bins;
            let span = cfg.binning.span(BinIndex(class));
            let year = rng.random_range(span.start()..=span.end());
            let (image, planted) = render(cfg, class, false, &mut rng)?;
            Ok(PlantedSample {
                image,
                year,
                label: BinIndex(class),
                planted,
                split: if i % cfg.test_every == cfg.test_every - 1 {
                    Split::Test
                } else {
                    Split::Train
                },
            })
        })
        .collect()
}

/// Source task: `n_classes` gratings from the rotated family.
pub fn source_dataset(
    cfg: &PlantedConfig,
    n_classes: usize,
) -> Result<(Vec<ImageTensor>, Vec<BinIndex>)> {
    if n_classes == 0 || n_classes > 12 {
        return Err(Error::InvalidConfig(
            "source task needs 1 to 12 classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f5c);
    let mut images = Vec::with_capacity(cfg.n_samples);
    let mut labels = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let class = i % n_classes;
        images.push(render(cfg, class, true, &mut rng)?.0);
        labels.push(BinIndex(class));
    }
    Ok((images, labels))
}

/// Settings of the planted transfer experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data: PlantedConfig,
    /// conv1, conv2, fc1, fc2 widths.
    pub widths: [usize; 4],
    pub pretrain: SgdConfig,
    pub finetune: SgdConfig,
    pub svm: TrainConfig,
    /// Layer whose activations feed the frozen-feature SVM.
    pub feature_layer: String,
    /// Layers whose units enter the entropy comparison.
    pub entropy_layers: Vec<String>,
    pub entropy_top_n: usize,
    pub low_entropy_bits: f64,
    pub occlusion: OcclusionConfig,
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        let pretrain = SgdConfig {
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0005,
            learning_rate: 0.003,
            n_iterations: 1500,
            seed,
            head_only: false,
        };
        PipelineConfig {
            data: PlantedConfig {
                seed,
                ..Default::default()
            },
            widths: [8, 16, 64, 32],
            finetune: SgdConfig {
                learning_rate: 0.001,
                seed: seed.wrapping_add(1),
                ..pretrain.clone()
            },
            pretrain,
            svm: TrainConfig {
                c_svm: 1.0,
                tolerance: 1e-6,
                max_epochs: 200,
                rng_seed: seed,
                ..Default::default()
            },
            feature_layer: "fc1".into(),
            entropy_layers: vec!["fc1".into(), "fc2".into()],
            entropy_top_n: 100,
            low_entropy_bits: 1.0,
            occlusion: OcclusionConfig {
                occluder_size: 4,
                stride: 2,
                mean_fill: true,
                ..Default::default()
            },
        }
    }
}

/// Measurements of one planted run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub source_accuracy: f64,
    pub frozen_mae: f64,
    pub finetuned_mae: f64,
    /// Units below the low-entropy threshold, summed over the entropy layers.
    pub low_entropy_pretrained: usize,
    pub low_entropy_finetuned: usize,
    /// Test images whose maximum-discrepancy patch overlaps the planted box
    /// with IoU at least 0.5.
    pub localized: usize,
    pub n_test: usize,
}

/// Pretrain on the source task, then compare a frozen-feature SVM with a
/// fine-tuned net on the planted target task, count low-entropy units before
/// and after fine-tuning, and check that occlusion of the fine-tuned net
/// finds the planted box. The occlusion score is the logit of the true
/// class.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let data = planted_dataset(&cfg.data)?;
    let binning = cfg.data.binning;
    let (src_x, src_y) = source_dataset(&cfg.data, binning.n_bins())?;
    let size = cfg.data.image_size;
    let shape = Shape::new(1, size, size);
    let [c1, c2, f1, f2] = cfg.widths;
    let specs = architecture(shape, binning.n_bins(), c1, c2, f1, f2);
    let mut pretrained = MicroNet::init(shape, &specs, cfg.data.seed)?;
    train(&mut pretrained, &src_x, &src_y, &cfg.pretrain)?;
    let source_correct = pretrained
        .forward(&src_x)?
        .iter()
        .zip(&src_y)
        .filter(|(p, l)| argmax(p) == l.0)
        .count();

    let (train_set, test_set): (Vec<&PlantedSample>, Vec<&PlantedSample>) =
        data.iter().partition(|s| s.split == Split::Train);
    let images = |set: &[&PlantedSample]| set.iter().map(|s| s.image.clone()).collect::<Vec<_>>();
    let (train_x, test_x) = (images(&train_set), images(&test_set));
    let train_y: Vec<BinIndex> = train_set.iter().map(|s| s.label).collect();
    let test_years: Vec<f64> = test_set.iter().map(|s| s.year as f64).collect();

    let svm = train_svm(
        &pretrained.features(&train_x, &cfg.feature_layer)?,
        &train_y,
        &binning,
        &cfg.svm,
    )?;
    let test_features = pretrained.features(&test_x, &cfg.feature_layer)?;
    let frozen_pred = test_features
        .rows()
        .map(|r| predict_year_svm(&svm, r))
        .collect::<Result<Vec<f64>>>()?;
    let frozen_mae = evaluate_mae(&frozen_pred, &test_years)?;

    let mut finetuned = pretrained.replace_head(binning.n_bins(), cfg.finetune.seed)?;
    train(&mut finetuned, &train_x, &train_y, &cfg.finetune)?;
    let ft_pred: Vec<f64> = finetuned
        .forward(&test_x)?
        .iter()
        .map(|p| binning.representative_year(BinIndex(argmax(p))) as f64)
        .collect();
    let finetuned_mae = evaluate_mae(&ft_pred, &test_years)?;

    let all_x: Vec<ImageTensor> = data.iter().map(|s| s.image.clone()).collect();
    let all_y: Vec<BinIndex> = data.iter().map(|s| s.label).collect();
    let low_entropy = |net: &MicroNet| -> Result<usize> {
        let mut n = 0;
        for layer in &cfg.entropy_layers {
            let table = ActivationTable::from_net(net, &all_x, layer)?;
            let report = entropy_histogram(
                &table,
                &all_y,
                &binning,
                cfg.entropy_top_n,
                ENTROPY_HIST_BINS,
            )?;
            n += report.count_below(cfg.low_entropy_bits);
        }
        Ok(n)
    };
    let low_entropy_pretrained = low_entropy(&pretrained)?;
    let low_entropy_finetuned = low_entropy(&finetuned)?;

    let box_size = cfg.data.box_size;
    let mut localized = 0;
    for s in &test_set {
        let class = s.label.0;
        let map = discrepancy_map(
            |img: &ImageTensor| Ok(finetuned.logits(img)?[class]),
            &s.image,
            &cfg.occlusion,
        )?;
        let patch = max_activation_patch(&map, box_size, box_size)?;
        if iou(&patch, &s.planted) >= 0.5 {
            localized += 1;
        }
    }
    Ok(PipelineOutcome {
        source_accuracy: source_correct as f64 / src_x.len() as f64,
        frozen_mae,
        finetuned_mae,
        low_entropy_pretrained,
        low_entropy_finetuned,
        localized,
        n_test: test_set.len(),
    })
}
