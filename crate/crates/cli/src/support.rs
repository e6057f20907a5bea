//! Failure classification, atomic output files and manifest helpers.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use chronolens::dates::{BinIndex, DateParser, TemporalBinning, YearRange};
use chronolens::ingest::{
    grayscale_transform, load_manifest, read_pnm_file, ImageTensor, Sample, Split,
};
use chronolens::persist::{load_model, Model};
use chronolens::Error;
use tempfile::NamedTempFile;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data { kind: &'static str, message: String },
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data { .. } => EXIT_DATA,
            Failure::Internal(_) => EXIT_INTERNAL,
        }
    }

    /// Prefix a data error with the record it concerns.
    pub fn context(self, what: impl fmt::Display) -> Failure {
        match self {
            Failure::Data { kind, message } => Failure::Data {
                kind,
                message: format!("{what}: {message}"),
            },
            other => other,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => Failure::Usage(m),
            e => Failure::Data {
                kind: e.kind(),
                message: e.to_string(),
            },
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

/// `error kind=<Kind> <message>` on a single line.
impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, message) = match self {
            Failure::Usage(m) => ("UsageError", m.as_str()),
            Failure::Data { kind, message } => (*kind, message.as_str()),
            Failure::Internal(m) => ("InternalError", m.as_str()),
        };
        let flat: String = message
            .chars()
            .map(|c| if c.is_control() { ' ' } else { c })
            .collect();
        write!(f, "error kind={kind} {flat}")
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

pub fn usage(message: impl Into<String>) -> Failure {
    Failure::Usage(message.into())
}

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input file not found: {}", path.display())))
    }
}

pub fn require_output(path: &Path) -> CliResult<()> {
    let parent = parent_dir(path);
    if path.file_name().is_none() || !parent.is_dir() {
        return Err(usage(format!("cannot write output to {}", path.display())));
    }
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Write through a temporary file in the target directory, renamed into
/// place only after `body` succeeds.
pub fn write_atomic<F>(path: &Path, body: F) -> CliResult<()>
where
    F: FnOnce(&mut dyn Write) -> CliResult<()>,
{
    let tmp = NamedTempFile::new_in(parent_dir(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Failure::from(e.error))?;
    Ok(())
}

/// Write to `path` atomically, or to standard output when absent.
pub fn emit<F>(path: Option<&Path>, body: F) -> CliResult<()>
where
    F: FnOnce(&mut dyn Write) -> CliResult<()>,
{
    match path {
        Some(p) => write_atomic(p, body),
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            body(&mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

pub fn parse_window(text: &str) -> Result<YearRange, String> {
    let (a, b) = text
        .split_once(':')
        .ok_or_else(|| format!("expected START:END, got {text:?}"))?;
    let start = a
        .trim()
        .parse()
        .map_err(|_| format!("bad start year {a:?}"))?;
    let end = b
        .trim()
        .parse()
        .map_err(|_| format!("bad end year {b:?}"))?;
    YearRange::new(start, end).map_err(|e| e.to_string())
}

pub fn binning(window: YearRange, bins: usize) -> CliResult<TemporalBinning> {
    TemporalBinning::from_window(window, bins).map_err(|e| usage(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    pub fn admits(self, split: Split) -> bool {
        match self {
            SplitArg::All => true,
            SplitArg::Train => split == Split::Train,
            SplitArg::Test => split == Split::Test,
        }
    }
}

pub struct Manifest {
    pub dir: PathBuf,
    pub samples: Vec<Sample>,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let samples = load_manifest(path)?;
        Ok(Manifest {
            dir: parent_dir(path),
            samples,
        })
    }

    /// Indices of the samples in `split`, in manifest order.
    pub fn select(&self, split: SplitArg) -> CliResult<Vec<usize>> {
        let picked: Vec<usize> = (0..self.samples.len())
            .filter(|&i| split.admits(self.samples[i].split))
            .collect();
        if picked.is_empty() {
            return Err(Error::EmptyDataset.into());
        }
        Ok(picked)
    }

    pub fn labels(
        &self,
        indices: &[usize],
        binning: &TemporalBinning,
    ) -> CliResult<Vec<(i32, BinIndex)>> {
        let parser = DateParser::default();
        indices
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                s.label(&parser, binning)
                    .map(|l| (l.year, l.bin))
                    .map_err(|e| Failure::from(e).context(format!("sample {:?}", s.id)))
            })
            .collect()
    }

    pub fn index(&self) -> HashMap<String, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect()
    }

    fn raw_image(&self, i: usize) -> CliResult<ImageTensor> {
        let s = &self.samples[i];
        let rel = s.path.as_ref().ok_or_else(|| {
            Failure::from(Error::ImageDecode(format!(
                "sample {:?} has no image path",
                s.id
            )))
        })?;
        read_pnm_file(self.dir.join(rel))
            .map_err(|e| Failure::from(e).context(format!("sample {:?}", s.id)))
    }

    /// Decode a sample's image and bring it to `channels` channels. Samples
    /// flagged grayscale are reduced to luma first.
    pub fn image(&self, i: usize, channels: usize) -> CliResult<ImageTensor> {
        adapt_channels(self.raw_image(i)?, channels, self.samples[i].grayscale)
    }

    /// `(channels, height, width)` of a sample as stored; grayscale-flagged
    /// samples count as one channel.
    pub fn native_shape(&self, i: usize) -> CliResult<(usize, usize, usize)> {
        let img = self.raw_image(i)?;
        let channels = if self.samples[i].grayscale {
            1
        } else {
            img.channels()
        };
        Ok((channels, img.height(), img.width()))
    }

    pub fn images(&self, indices: &[usize], channels: usize) -> CliResult<Vec<ImageTensor>> {
        indices.iter().map(|&i| self.image(i, channels)).collect()
    }
}

pub fn adapt_channels(
    img: ImageTensor,
    channels: usize,
    grayscale: bool,
) -> CliResult<ImageTensor> {
    let img = if (grayscale || channels == 1) && img.channels() == 3 {
        grayscale_transform(&img)?
    } else {
        img
    };
    match (img.channels(), channels) {
        (a, b) if a == b => Ok(img),
        (1, 3) => {
            let plane = img.values().to_vec();
            let values = [plane.as_slice(); 3].concat();
            Ok(ImageTensor::new(img.height(), img.width(), 3, values)?)
        }
        (a, b) => {
            Err(Error::ShapeMismatch(format!("image has {a} channels, model expects {b}")).into())
        }
    }
}

pub fn load(path: &Path) -> CliResult<Model> {
    Ok(load_model(path)?)
}

/// Comma-joined shortest round-trip representations.
pub fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn prob_header(n: usize) -> String {
    (0..n)
        .map(|k| format!("p{k}"))
        .collect::<Vec<_>>()
        .join(",")
}
