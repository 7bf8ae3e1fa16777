//! Datasets: synthetic generators, CSV and IDX readers.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Seed of the fixed sine test set.
pub const SINE_TEST_SEED: u64 = 0x5e7_7e57;
/// Size of the fixed sine test set.
pub const SINE_TEST_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// One target vector per row.
    Regression(Matrix),
    /// One class index per sample, each below `classes`.
    Classes { labels: Vec<usize>, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

/// Inputs (one sample per row) with regression targets or class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets, split: Split) -> Result<Self> {
        let n = match &targets {
            Targets::Regression(t) => t.rows(),
            Targets::Classes { labels, classes } => {
                if let Some(l) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::Precondition(format!(
                        "label {l} out of range for {classes} classes"
                    )));
                }
                labels.len()
            }
        };
        if n != inputs.rows() {
            return Err(Error::dim(format!(
                "{} inputs but {n} targets",
                inputs.rows()
            )));
        }
        Ok(Self {
            inputs,
            targets,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Regression target dimension or number of classes.
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            Targets::Regression(t) => t.cols(),
            Targets::Classes { classes, .. } => *classes,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Regression(_) => None,
        }
    }

    /// Samples at the given row indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |m: &Matrix| {
            let mut data = Vec::with_capacity(idx.len() * m.cols());
            for &i in idx {
                data.extend_from_slice(m.row(i));
            }
            Matrix::from_raw(idx.len(), m.cols(), data)
        };
        let targets = match &self.targets {
            Targets::Regression(t) => Targets::Regression(pick(t)),
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        };
        Dataset {
            inputs: pick(&self.inputs),
            targets,
            split: self.split,
        }
    }

    /// Seeded shuffle, then the last `test_fraction` of samples become the test split.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let cut = self.len() - n_test.min(self.len());
        let mut train = self.subset(&idx[..cut]);
        let mut test = self.subset(&idx[cut..]);
        train.split = Split::Train;
        test.split = Split::Test;
        (train, test)
    }

    /// Empirical variance of the regression targets, averaged over components.
    pub fn target_variance(&self) -> Option<f64> {
        let Targets::Regression(t) = &self.targets else {
            return None;
        };
        let n = t.rows() as f64;
        let mut total = 0.0;
        for j in 0..t.cols() {
            let mean = (0..t.rows()).map(|i| t[(i, j)]).sum::<f64>() / n;
            total += (0..t.rows()).map(|i| (t[(i, j)] - mean).powi(2)).sum::<f64>() / n;
        }
        Some(total / t.cols() as f64)
    }
}

pub fn sine_target(x: f64) -> f64 {
    (10.0 * x).sin() + x
}

/// `n` inputs uniform on `[0, 1]` with targets `sin(10x) + x`.
pub fn gen_sine(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| sine_target(x)).collect();
    Dataset {
        inputs: Matrix::from_raw(n, 1, xs),
        targets: Targets::Regression(Matrix::from_raw(n, 1, ys)),
        split: Split::Train,
    }
}

/// The fixed sine test set shared by every run.
pub fn sine_test_set() -> Dataset {
    let mut d = gen_sine(SINE_TEST_SIZE, SINE_TEST_SEED);
    d.split = Split::Test;
    d
}

/// Upper moon `(cos t, sin t)` (label 0) and lower moon `(1 − cos t, 0.5 − sin t)`
/// (label 1), `t` uniform on `[0, π]`, plus isotropic Gaussian noise.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise.max(0.0)).expect("valid standard deviation");
    let n0 = n.div_ceil(2);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = usize::from(i >= n0);
        let t = rng.gen_range(0.0..=std::f64::consts::PI);
        let (x, y) = moon_point(label, t);
        let (ex, ey) = if noise > 0.0 {
            (gauss.sample(&mut rng), gauss.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        data.push(x + ex);
        data.push(y + ey);
        labels.push(label);
    }
    Dataset {
        inputs: Matrix::from_raw(n, 2, data),
        targets: Targets::Classes { labels, classes: 2 },
        split: Split::All,
    }
}

/// Noise-free point of moon `label` at parameter `t`.
pub fn moon_point(label: usize, t: f64) -> (f64, f64) {
    if label == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    }
}

/// Reads a CSV with header `x1,…,xm,y1,…,yn` (regression) or `x1,…,xm,label`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::parse_line(1, e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    let m = names.iter().take_while(|h| h.starts_with('x')).count();
    let rest = &names[m..];
    let classification = rest == ["label"];
    if m == 0 || rest.is_empty() || (!classification && !rest.iter().all(|h| h.starts_with('y'))) {
        return Err(Error::parse_line(
            1,
            "header must be x1,...,xm followed by y1,...,yn or label",
        ));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse_line(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(Error::parse_line(
                line,
                format!("expected {} cells, found {}", names.len(), rec.len()),
            ));
        }
        for (k, cell) in rec.iter().enumerate() {
            if classification && k == m {
                let l: usize = cell
                    .parse()
                    .map_err(|_| Error::parse_line(line, format!("bad label {cell:?}")))?;
                labels.push(l);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::parse_line(line, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse_line(line, format!("non-finite value {cell:?}")));
            }
            if k < m {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
        rows += 1;
    }
    let inputs = Matrix::from_raw(rows, m, xs);
    let targets = if classification {
        let classes = labels.iter().max().map_or(1, |l| l + 1).max(2);
        Targets::Classes { labels, classes }
    } else {
        Targets::Regression(Matrix::from_raw(rows, rest.len(), ys))
    };
    Dataset::new(inputs, targets, Split::All)
}

/// Writes the dataset in the format read by [`load_csv`], 17 significant digits.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv(data))?;
    Ok(())
}

pub fn to_csv(data: &Dataset) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let m = data.input_dim();
    let mut header: Vec<String> = (1..=m).map(|i| format!("x{i}")).collect();
    match &data.targets {
        Targets::Regression(t) => header.extend((1..=t.cols()).map(|i| format!("y{i}"))),
        Targets::Classes { .. } => header.push("label".into()),
    }
    wtr.write_record(&header).expect("in-memory write");
    for r in 0..data.len() {
        let mut row: Vec<String> = data.inputs.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        match &data.targets {
            Targets::Regression(t) => row.extend(t.row(r).iter().map(|v| format!("{v:.16e}"))),
            Targets::Classes { labels, .. } => row.push(labels[r].to_string()),
        }
        wtr.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("ascii output")
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse_byte(
                self.bytes.len() as u64,
                format!("file truncated while reading {what} (needed {n} bytes at offset {})", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// IDX image file (magic `0x00000803`): one row per image, pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let mut c = ByteCursor { bytes, pos: 0 };
    let magic = c.u32("magic")?;
    if magic != IDX_IMAGES {
        return Err(Error::parse_byte(0, format!("bad image magic {magic:#010x}")));
    }
    let n = c.u32("image count")? as usize;
    let rows = c.u32("row count")? as usize;
    let cols = c.u32("column count")? as usize;
    let px = c.take(n * rows * cols, "pixels")?;
    let data = px.iter().map(|&p| p as f64 / 255.0).collect();
    Ok(Matrix::from_raw(n, rows * cols, data))
}

/// IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut c = ByteCursor { bytes, pos: 0 };
    let magic = c.u32("magic")?;
    if magic != IDX_LABELS {
        return Err(Error::parse_byte(0, format!("bad label magic {magic:#010x}")));
    }
    let n = c.u32("label count")? as usize;
    Ok(c.take(n, "labels")?.iter().map(|&l| l as usize).collect())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Images and labels from a pair of IDX files, classes `0..=9`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let x = parse_idx_images(&read_bytes(images.as_ref())?)?;
    let y = parse_idx_labels(&read_bytes(labels.as_ref())?)?;
    if x.rows() != y.len() {
        return Err(Error::parse_byte(
            4,
            format!("{} images but {} labels", x.rows(), y.len()),
        ));
    }
    let classes = y.iter().max().map_or(10, |l| (l + 1).max(10));
    Dataset::new(x, Targets::Classes { labels: y, classes }, Split::All)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_targets() {
        assert_eq!(sine_target(0.0), 0.0);
        let x = std::f64::consts::PI / 10.0;
        assert!((sine_target(x) - x).abs() < 1e-15);
        assert_eq!(gen_sine(500, 4), gen_sine(500, 4));
        assert_eq!(sine_test_set().len(), 1000);
    }

    #[test]
    fn moons_geometry_and_balance() {
        assert_eq!(moon_point(0, 0.0), (1.0, 0.0));
        let (x, y) = moon_point(0, std::f64::consts::FRAC_PI_2);
        assert!(x.abs() < 1e-15 && (y - 1.0).abs() < 1e-15);
        let (x, y) = moon_point(1, std::f64::consts::FRAC_PI_2);
        assert!((x - 1.0).abs() < 1e-15 && (y + 0.5).abs() < 1e-15);
        let d = gen_two_moons(101, 0.1, 1);
        let ones = d.labels().unwrap().iter().filter(|&&l| l == 1).count();
        assert!((101 - 2 * ones as i64).abs() <= 1);
    }

    #[test]
    fn idx_single_pixel_and_truncation() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 255];
        assert_eq!(parse_idx_images(&img).unwrap().as_slice(), &[1.0]);
        img.pop();
        match parse_idx_images(&img) {
            Err(Error::Parse { at, .. }) => assert_eq!(at, crate::error::Position::Byte(16)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_idx_images(&[0, 0, 8, 1]).is_err());
        assert_eq!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 3]).unwrap(), vec![7, 3]);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let d = gen_two_moons(10, 0.1, 2);
        assert_eq!(parse_csv(&to_csv(&d)).unwrap().inputs, d.inputs);
        let s = gen_sine(7, 3);
        let back = parse_csv(&to_csv(&s)).unwrap();
        assert_eq!(back.targets, s.targets);
        match parse_csv("x1,y1\n1,2\n3,abc\n") {
            Err(Error::Parse { at, .. }) => assert_eq!(at, crate::error::Position::Line(3)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_csv("a,b\n1,2\n").is_err());
    }
}
