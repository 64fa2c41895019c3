//! Synthetic data from the model prior and count-matrix file formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_prior, CountDataset, Theta};

const MAGIC: &[u8; 4] = b"DPMM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub alpha: f64,
    pub gamma: f64,
    /// Total count of every observation.
    pub trials: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 10,
            n_train: 1000,
            n_test: 100,
            alpha: 1.0,
            gamma: 1.0,
            trials: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.dim == 0 {
            return bad("dimension must be at least 1");
        }
        if self.n_train == 0 {
            return bad("at least one training observation is required");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        Ok(())
    }
}

/// Generating partition and parameters. Labels cover training rows first,
/// then test rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub train_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
    pub thetas: Vec<Theta>,
}

impl GroundTruth {
    /// Number of clusters with at least one member, train and test together.
    pub fn k_true(&self) -> usize {
        self.thetas.len()
    }

    /// Number of distinct clusters among the training rows.
    pub fn k_train(&self) -> usize {
        let mut seen = vec![false; self.thetas.len()];
        for &l in &self.train_labels {
            seen[l] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }
}

pub struct SyntheticData {
    pub train: CountDataset,
    pub test: CountDataset,
    pub truth: GroundTruth,
}

/// Chinese restaurant process seating of `n` customers.
pub fn crp_labels<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<usize> {
    let mut sizes: Vec<usize> = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let u = rng.random::<f64>() * (i as f64 + alpha);
        let mut acc = 0.0;
        let mut table = sizes.len();
        for (k, &s) in sizes.iter().enumerate() {
            acc += s as f64;
            if u < acc {
                table = k;
                break;
            }
        }
        if table == sizes.len() {
            sizes.push(0);
        }
        sizes[table] += 1;
        labels.push(table);
    }
    labels
}

/// One multinomial draw via successive conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(trials: u32, probs: &[f64], rng: &mut R) -> Vec<u32> {
    let mut out = vec![0u32; probs.len()];
    let mut left = trials as u64;
    let mut mass = 1.0;
    for (j, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if j + 1 == probs.len() {
            out[j] = left as u32;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let k = Binomial::new(left, q).expect("probability in [0, 1]").sample(rng);
        out[j] = k as u32;
        left -= k;
        mass -= p;
    }
    out
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_train + spec.n_test;
    let labels = crp_labels(n, spec.alpha, &mut rng);
    let k = labels.iter().max().map_or(0, |&l| l + 1);
    let thetas = (0..k)
        .map(|_| sample_prior(spec.gamma, spec.dim, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<u32>> = labels
        .iter()
        .map(|&l| sample_multinomial(spec.trials, thetas[l].probs(), &mut rng))
        .collect();
    let (train_rows, test_rows) = rows.split_at(spec.n_train);
    Ok(SyntheticData {
        train: CountDataset::new(spec.dim, train_rows.to_vec())?,
        test: CountDataset::new(spec.dim, test_rows.to_vec())?,
        truth: GroundTruth {
            train_labels: labels[..spec.n_train].to_vec(),
            test_labels: labels[spec.n_train..].to_vec(),
            thetas,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    DenseBinary,
}

impl Format {
    /// `.bin` and `.dpmm` files are binary, anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin" | "dpmm") => Format::DenseBinary,
            _ => Format::Csv,
        }
    }
}

pub fn load_counts(path: &Path, format: Format) -> Result<CountDataset> {
    let file = File::open(path)?;
    match format {
        Format::Csv => parse_csv(BufReader::new(file)),
        Format::DenseBinary => read_binary(BufReader::new(file)).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Format {
                path: path.to_path_buf(),
                message: "file is truncated".into(),
            },
            Error::InvalidParameter(message) => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        }),
    }
}

/// Parses comma-separated counts, one observation per line. Lines starting
/// with `#` are ignored. Errors carry the 1-based row number.
pub fn parse_csv<R: Read>(input: R) -> Result<CountDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<Vec<u32>> = Vec::new();
    let mut dim = None;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Input { row, message: e.to_string() })?;
        let values = record
            .iter()
            .map(|f| {
                f.parse::<u32>().map_err(|_| Error::Input {
                    row,
                    message: format!("'{f}' is not a non-negative integer count"),
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Input {
                    row,
                    message: format!("expected {d} fields, found {}", values.len()),
                })
            }
            _ => {}
        }
        if values.iter().all(|&v| v == 0) {
            return Err(Error::Input {
                row,
                message: "observation has no counts".into(),
            });
        }
        rows.push(values);
    }
    match dim {
        Some(d) => CountDataset::new(d, rows),
        None => Err(Error::Input {
            row: 0,
            message: "no observations".into(),
        }),
    }
}

pub fn write_csv<W: Write>(data: &CountDataset, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for row in data.rows() {
        let line: Vec<String> = row.iter().map(u32::to_string).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_binary<W: Write>(data: &CountDataset, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(data.len() as u64).to_le_bytes())?;
    out.write_all(&(data.dim() as u64).to_le_bytes())?;
    for &c in data.as_flat() {
        out.write_all(&c.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<CountDataset> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidParameter("bad magic number".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::InvalidParameter(format!("unsupported version {version}")));
    }
    input.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    input.read_exact(&mut b8)?;
    let d = u64::from_le_bytes(b8) as usize;
    let len = n
        .checked_mul(d)
        .ok_or_else(|| Error::InvalidParameter("header size overflows".into()))?;
    let mut counts = Vec::with_capacity(len.min(1 << 24));
    for _ in 0..len {
        input.read_exact(&mut b4)?;
        counts.push(u32::from_le_bytes(b4));
    }
    if input.read(&mut b4)? != 0 {
        return Err(Error::InvalidParameter("trailing bytes after counts".into()));
    }
    CountDataset::from_flat(d, counts)
}

pub fn save_counts(data: &CountDataset, path: &Path, format: Format) -> Result<()> {
    let file = File::create(path)?;
    match format {
        Format::Csv => write_csv(data, file),
        Format::DenseBinary => write_binary(data, file),
    }
}
