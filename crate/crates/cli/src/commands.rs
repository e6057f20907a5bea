use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use chronolens::analysis::{
    discrepancy_map, entropy_histogram, group_detectors, max_activation_patch, read_detectors,
    ActivationTable, CorrelationConfig, OcclusionConfig,
};
use chronolens::dates::{BinIndex, DateParser, TemporalBinning};
use chronolens::influence::{collection_decade_with, read_collections, trend, Aggregate};
use chronolens::ingest::{load_features, read_pnm_file, ImageTensor};
use chronolens::linear::{evaluate_mae, predict_year_svm, train_svm, train_svr, TrainConfig};
use chronolens::net::{argmax, default_architecture, train, MicroNet, SgdConfig, Shape};
use chronolens::persist::{encode_model, Model};
use chronolens::Error;

use crate::support::{
    adapt_channels, binning, emit, join, load, prob_header, require_file, require_output, usage,
    write_atomic, CliResult, Failure, Manifest,
};
use crate::{AggregateArg, BinningArgs, Command, FinetuneArgs, LinearArgs, OcclusionArgs};

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::ParseDates {
            manifest,
            binning,
            out,
        } => parse_dates(&manifest, binning, out.as_deref()),
        Command::TrainSvm(a) => train_linear(a, true),
        Command::TrainSvr(a) => train_linear(a, false),
        Command::Finetune(a) => finetune(a),
        Command::Eval {
            model,
            features,
            manifest,
            split,
            binning: b,
        } => {
            require_file(&model)?;
            require_file(&manifest)?;
            if let Some(f) = &features {
                require_file(f)?;
            }
            let binning = binning(b.window, b.bins)?;
            let m = Manifest::load(&manifest)?;
            let picked = m.select(split)?;
            let truth: Vec<f64> = m
                .labels(&picked, &binning)?
                .iter()
                .map(|l| l.0 as f64)
                .collect();
            let predicted = match load(&model)? {
                Model::Net(net) => {
                    if features.is_some() {
                        return Err(usage("--features is not used with a net model"));
                    }
                    predict_net_years(&net, &m, &picked, &binning)?
                }
                linear => {
                    let path = features
                        .ok_or_else(|| usage("--features is required for linear models"))?;
                    let x = load_features(&path, Some(m.samples.len()), None)?.select_rows(&picked);
                    match linear {
                        Model::Svm(s) => x
                            .rows()
                            .map(|r| predict_year_svm(&s, r))
                            .collect::<Result<_, _>>()?,
                        Model::Svr(s) => {
                            x.rows().map(|r| s.predict(r)).collect::<Result<_, _>>()?
                        }
                        Model::Net(_) => unreachable!(),
                    }
                }
            };
            let mae = evaluate_mae(&predicted, &truth)?;
            emit(None, |w| Ok(writeln!(w, "{mae:.6}")?))
        }
        Command::Entropy {
            model,
            manifest,
            layer,
            topn,
            hist_bins,
            split,
            binning: b,
            out,
        } => {
            require_file(&model)?;
            require_file(&manifest)?;
            check_out(out.as_deref())?;
            let binning = binning(b.window, b.bins)?;
            let net = load(&model)?.into_net()?;
            let m = Manifest::load(&manifest)?;
            let picked = m.select(split)?;
            let labels: Vec<BinIndex> = m.labels(&picked, &binning)?.iter().map(|l| l.1).collect();
            let images = m.images(&picked, net.input_shape().channels)?;
            let table = ActivationTable::from_net(&net, &images, &layer)?;
            let report = entropy_histogram(&table, &labels, &binning, topn, hist_bins)?;
            emit(out.as_deref(), |w| {
                writeln!(
                    w,
                    "# layer={layer} topn={topn} samples={} window={}:{} bins={}",
                    picked.len(),
                    b.window.start(),
                    b.window.end(),
                    b.bins
                )?;
                writeln!(w, "unit,entropy")?;
                for (u, e) in report.entropies.iter().enumerate() {
                    writeln!(w, "{u},{e}")?;
                }
                writeln!(w, "# histogram")?;
                writeln!(w, "lo,hi,count")?;
                for (k, c) in report.counts.iter().enumerate() {
                    writeln!(w, "{},{},{c}", report.edges[k], report.edges[k + 1])?;
                }
                Ok(())
            })
        }
        Command::Occlude {
            model,
            image,
            layer,
            unit,
            occlusion,
            patch,
            grayscale,
            out,
        } => {
            require_file(&model)?;
            require_file(&image)?;
            check_out(out.as_deref())?;
            let net = load(&model)?.into_net()?;
            let img = adapt_channels(
                read_pnm_file(&image)?,
                net.input_shape().channels,
                grayscale,
            )?;
            check_unit(&net, &layer, unit)?;
            let cfg = occlusion_config(occlusion);
            let map = discrepancy_map(unit_score(&net, &layer, unit), &img, &cfg)?;
            let best = patch
                .map(|p| max_activation_patch(&map, p, p))
                .transpose()?;
            emit(out.as_deref(), |w| {
                writeln!(
                    w,
                    "# layer={layer} unit={unit} occ={} stride={} fill={} rows={} cols={}",
                    cfg.occluder_size,
                    cfg.stride,
                    fill_label(&cfg),
                    map.rows,
                    map.cols
                )?;
                if let Some(b) = best {
                    writeln!(w, "# patch x={} y={} w={} h={}", b.x, b.y, b.w, b.h)?;
                }
                for r in 0..map.rows {
                    let row: Vec<String> =
                        (0..map.cols).map(|c| map.get(r, c).to_string()).collect();
                    writeln!(w, "{}", row.join(" "))?;
                }
                Ok(())
            })
        }
        Command::Correlate {
            detectors,
            model,
            manifest,
            layer,
            fraction,
            units,
            images,
            patch,
            occlusion,
            out,
        } => {
            require_file(&detectors)?;
            require_file(&model)?;
            require_file(&manifest)?;
            check_out(out.as_deref())?;
            let net = load(&model)?.into_net()?;
            let m = Manifest::load(&manifest)?;
            let records = read_detectors(BufReader::new(File::open(&detectors)?))?;
            let grouped = group_detectors(&records, &m.index())?;
            let all: Vec<usize> = (0..m.samples.len()).collect();
            let imgs = m.images(&all, net.input_shape().channels)?;
            let table = ActivationTable::from_net(&net, &imgs, &layer)?;
            let occ = occlusion_config(occlusion);
            let cfg = CorrelationConfig {
                fraction,
                units_per_detector: units,
                images_per_unit: images,
            };
            let (reports, summary) =
                chronolens::analysis::correlation_report(&table, &grouped, &cfg, |u, s| {
                    let map = discrepancy_map(unit_score(&net, &layer, u), &imgs[s], &occ)?;
                    max_activation_patch(&map, patch, patch)
                })?;
            emit(out.as_deref(), |w| {
                writeln!(
                    w,
                    "# layer={layer} fraction={fraction} units={units} images={images} patch={patch} occ={} stride={} fill={}",
                    occ.occluder_size,
                    occ.stride,
                    fill_label(&occ)
                )?;
                writeln!(w, "detector,rank,unit,correlation,n_iou,mean_iou")?;
                for r in &reports {
                    for (rank, u) in r.units.iter().enumerate() {
                        let mean = if u.ious.is_empty() {
                            f64::NAN
                        } else {
                            u.ious.iter().sum::<f64>() / u.ious.len() as f64
                        };
                        writeln!(
                            w,
                            "{},{},{},{},{},{mean}",
                            r.detector,
                            rank + 1,
                            u.unit,
                            u.correlation,
                            u.ious.len()
                        )?;
                    }
                }
                writeln!(w, "# summary")?;
                writeln!(
                    w,
                    "mean_correlation,mean_iou,n_iou,frac_iou_below_0.1,frac_iou_at_least_0.5"
                )?;
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    summary.mean_correlation,
                    summary.mean_iou,
                    summary.n_ious,
                    summary.frac_iou_below_01,
                    summary.frac_iou_at_least_05
                )?;
                Ok(())
            })
        }
        Command::Influence {
            model,
            manifest,
            collections,
            aggregate,
            binning: b,
            out,
        } => {
            require_file(&model)?;
            require_file(&manifest)?;
            require_file(&collections)?;
            check_out(out.as_deref())?;
            let binning = binning(b.window, b.bins)?;
            let net = load(&model)?.into_net()?;
            check_classes(&net, &binning)?;
            let m = Manifest::load(&manifest)?;
            let index = m.index();
            let collections = read_collections(BufReader::new(File::open(&collections)?))?;
            let rule = match aggregate {
                AggregateArg::Mean => Aggregate::Mean,
                AggregateArg::Vote => Aggregate::Vote,
            };
            let channels = net.input_shape().channels;
            let mut rows = Vec::with_capacity(collections.len());
            let mut groups: BTreeMap<i32, Vec<Vec<f64>>> = BTreeMap::new();
            for c in &collections {
                let members = c
                    .members
                    .iter()
                    .map(|id| {
                        index.get(id).copied().ok_or_else(|| {
                            Failure::from(Error::UniverseMismatch(format!(
                                "collection {:?} member {id:?} not in manifest",
                                c.id
                            )))
                        })
                    })
                    .collect::<CliResult<Vec<usize>>>()?;
                let probs = net.forward(&m.images(&members, channels)?)?;
                let d = collection_decade_with(&probs, rule)
                    .map_err(|e| Failure::from(e).context(&c.id))?;
                groups.entry(c.year).or_default().push(d.mean.clone());
                rows.push((c, binning.span(d.decade).start(), d.mean));
            }
            let table = trend(&groups)?;
            let k = binning.n_bins();
            emit(out.as_deref(), |w| {
                writeln!(
                    w,
                    "# aggregate={} window={}:{} bins={k}",
                    match rule {
                        Aggregate::Mean => "mean",
                        Aggregate::Vote => "vote",
                    },
                    b.window.start(),
                    b.window.end()
                )?;
                writeln!(w, "collection_id,year,decade,{}", prob_header(k))?;
                for (c, decade, mean) in &rows {
                    writeln!(w, "{},{},{decade},{}", c.id, c.year, join(mean))?;
                }
                writeln!(w, "# trend")?;
                writeln!(w, "year,{}", prob_header(k))?;
                for (year, row) in table.years.iter().zip(&table.rows) {
                    writeln!(w, "{year},{}", join(row))?;
                }
                Ok(())
            })
        }
    }
}

fn check_out(out: Option<&Path>) -> CliResult<()> {
    out.map_or(Ok(()), require_output)
}

fn parse_dates(manifest: &Path, b: BinningArgs, out: Option<&Path>) -> CliResult<()> {
    require_file(manifest)?;
    check_out(out)?;
    let binning = binning(b.window, b.bins)?;
    let m = Manifest::load(manifest)?;
    let parser = DateParser::default();
    let mut rows = Vec::with_capacity(m.samples.len());
    for s in &m.samples {
        let raw = s
            .label_year
            .map_or_else(|| s.date_fields().join(" | "), |y| y.to_string());
        let parsed = s
            .parsed_range(&parser, binning.window())
            .and_then(|r| chronolens::dates::quantize(r, &binning).map(|bin| (r, bin)));
        let row = match parsed {
            Ok((r, bin)) => [
                s.id.clone(),
                raw,
                r.start().to_string(),
                r.end().to_string(),
                bin.0.to_string(),
                "ok".into(),
            ],
            Err(e) => [
                s.id.clone(),
                raw,
                String::new(),
                String::new(),
                String::new(),
                e.kind().into(),
            ],
        };
        rows.push(row);
    }
    emit(out, |w| {
        writeln!(
            w,
            "# window={}:{} bins={}",
            b.window.start(),
            b.window.end(),
            b.bins
        )?;
        let mut csv = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Failure::from(std::io::Error::other(e));
        csv.write_record(["id", "raw_text", "start_year", "end_year", "bin", "status"])
            .map_err(csv_err)?;
        for r in &rows {
            csv.write_record(r).map_err(csv_err)?;
        }
        csv.flush()?;
        Ok(())
    })
}

fn train_linear(a: LinearArgs, svm: bool) -> CliResult<()> {
    require_file(&a.features)?;
    require_file(&a.manifest)?;
    require_output(&a.out)?;
    let binning = binning(a.binning.window, a.binning.bins)?;
    let m = Manifest::load(&a.manifest)?;
    let x = load_features(&a.features, Some(m.samples.len()), None)?;
    let picked = m.select(a.split)?;
    let labels = m.labels(&picked, &binning)?;
    let x = x.select_rows(&picked);
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        c_svm: a.c.unwrap_or(defaults.c_svm),
        c_svr: a.c.unwrap_or(defaults.c_svr),
        epsilon: a.epsilon,
        max_epochs: a.max_epochs,
        tolerance: a.tolerance,
        rng_seed: a.seed,
        normalize_rows: a.normalize,
    };
    let model = if svm {
        let bins: Vec<BinIndex> = labels.iter().map(|l| l.1).collect();
        Model::Svm(train_svm(&x, &bins, &binning, &cfg)?)
    } else {
        let years: Vec<f64> = labels.iter().map(|l| l.0 as f64).collect();
        Model::Svr(train_svr(&x, &years, &cfg)?)
    };
    write_atomic(&a.out, |w| Ok(w.write_all(&encode_model(&model))?))
}

fn finetune(a: FinetuneArgs) -> CliResult<()> {
    if let Some(b) = &a.base {
        require_file(b)?;
    }
    require_file(&a.manifest)?;
    require_output(&a.out)?;
    check_out(a.history.as_deref())?;
    let binning = binning(a.binning.window, a.binning.bins)?;
    if a.classes != binning.n_bins() {
        return Err(usage(format!(
            "--classes {} does not match --bins {}",
            a.classes,
            binning.n_bins()
        )));
    }
    let m = Manifest::load(&a.manifest)?;
    let picked = m.select(a.split)?;
    let labels: Vec<BinIndex> = m.labels(&picked, &binning)?.iter().map(|l| l.1).collect();
    let mut net = match &a.base {
        Some(path) => {
            let base = load(path)?.into_net()?;
            if a.keep_head {
                check_classes(&base, &binning)?;
                base
            } else {
                base.replace_head(a.classes, a.seed)?
            }
        }
        None => {
            let (channels, height, width) = m.native_shape(picked[0])?;
            let shape = Shape::new(channels, height, width);
            MicroNet::init(shape, &default_architecture(shape, a.classes), a.seed)?
        }
    };
    let images = m.images(&picked, net.input_shape().channels)?;
    let cfg = SgdConfig {
        batch_size: a.batch,
        momentum: a.momentum,
        weight_decay: a.decay,
        learning_rate: a.lr,
        n_iterations: a.iters,
        seed: a.seed.wrapping_add(1),
        head_only: a.head_only,
    };
    let history = train(&mut net, &images, &labels, &cfg)?;
    emit(a.history.as_deref(), |w| {
        writeln!(
            w,
            "# seed={} iters={} batch={} lr={} momentum={} decay={} samples={}",
            a.seed,
            a.iters,
            a.batch,
            a.lr,
            a.momentum,
            a.decay,
            picked.len()
        )?;
        writeln!(w, "iteration,loss")?;
        for (i, l) in history.iter().enumerate() {
            writeln!(w, "{},{l}", i + 1)?;
        }
        Ok(())
    })?;
    write_atomic(
        &a.out,
        |w| Ok(w.write_all(&encode_model(&Model::Net(net)))?),
    )
}

fn predict_net_years(
    net: &MicroNet,
    m: &Manifest,
    picked: &[usize],
    binning: &TemporalBinning,
) -> CliResult<Vec<f64>> {
    check_classes(net, binning)?;
    let images = m.images(picked, net.input_shape().channels)?;
    Ok(net
        .forward(&images)?
        .iter()
        .map(|p| binning.representative_year(BinIndex(argmax(p))) as f64)
        .collect())
}

fn check_classes(net: &MicroNet, binning: &TemporalBinning) -> CliResult<()> {
    if net.n_classes() != binning.n_bins() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} classes, binning has {} bins",
            net.n_classes(),
            binning.n_bins()
        ))
        .into());
    }
    Ok(())
}

fn check_unit(net: &MicroNet, layer: &str, unit: usize) -> CliResult<()> {
    let n_units = net.layers()[net.layer_index(layer)?].n_units();
    if unit >= n_units {
        return Err(Error::UnitOutOfRange { unit, n_units }.into());
    }
    Ok(())
}

fn unit_score<'a>(
    net: &'a MicroNet,
    layer: &'a str,
    unit: usize,
) -> impl Fn(&ImageTensor) -> chronolens::Result<f64> + Sync + 'a {
    move |img| net.unit_activations(img, layer).map(|a| a[unit])
}

fn occlusion_config(o: OcclusionArgs) -> OcclusionConfig {
    OcclusionConfig {
        occluder_size: o.occ,
        stride: o.stride,
        fill_value: o.fill,
        mean_fill: o.mean_fill,
    }
}

fn fill_label(cfg: &OcclusionConfig) -> String {
    if cfg.mean_fill {
        "mean".into()
    } else {
        cfg.fill_value.to_string()
    }
}
