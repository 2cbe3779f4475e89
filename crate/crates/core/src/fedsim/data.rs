use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FedsimError, ModelFamily, Result};

/// Feature rows and labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(FedsimError::MalformedCsv {
                line: 0,
                reason: format!("{} rows but {} labels", x.len(), y.len()),
            });
        }
        if let Some(w) = x.first().map(Vec::len) {
            if let Some(i) = x.iter().position(|r| r.len() != w) {
                return Err(FedsimError::MalformedCsv {
                    line: i + 1,
                    reason: format!("expected {w} features"),
                });
            }
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Feature width, without the bias.
    pub fn features(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let mut out = Dataset::default();
        for p in parts {
            out.x.extend(p.x.iter().cloned());
            out.y.extend(p.y.iter().copied());
        }
        out
    }

    /// SHA-256 over the little-endian bytes of every value, row by row.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (row, y) in self.x.iter().zip(&self.y) {
            for v in row {
                h.update(v.to_le_bytes());
            }
            h.update(y.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Parses numeric CSV; the last column is the label.
pub fn read_csv<R: Read>(reader: R, has_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut width = None;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1 + usize::from(has_header);
        let rec = rec.map_err(|e| FedsimError::MalformedCsv {
            line,
            reason: e.to_string(),
        })?;
        if rec.len() < 2 {
            return Err(FedsimError::MalformedCsv {
                line,
                reason: "need at least one feature and a label".into(),
            });
        }
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(FedsimError::MalformedCsv {
                line,
                reason: format!("ragged row: {} fields, expected {}", rec.len(), width.unwrap()),
            });
        }
        let mut vals = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| FedsimError::MalformedCsv {
                        line,
                        reason: format!("non-numeric cell {f:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        y.push(vals.pop().expect("checked length"));
        x.push(vals);
    }
    Dataset::new(x, y)
}

pub fn load_csv(path: &Path, has_header: bool) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| FedsimError::Io(format!("{}: {e}", path.display())))?;
    read_csv(f, has_header)
}

/// Random equal split into `users` shards; the remainder is dropped.
pub fn partition<R: Rng + ?Sized>(data: &Dataset, users: usize, rng: &mut R) -> Result<Vec<Dataset>> {
    if users == 0 || data.len() < users {
        return Err(FedsimError::TooFewExamples {
            have: data.len(),
            need: users.max(1),
        });
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let per = data.len() / users;
    let dropped = data.len() - per * users;
    if dropped > 0 {
        log::warn!("dropping {dropped} examples so that {users} users get {per} each");
    }
    Ok(idx.chunks_exact(per).take(users).map(|c| data.subset(c)).collect())
}

/// Splits off the first `fraction` of a shuffled copy as a held-out set.
pub fn holdout<R: Rng + ?Sized>(data: &Dataset, fraction: f64, rng: &mut R) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let k = ((data.len() as f64) * fraction).round() as usize;
    let (a, b) = idx.split_at(k.min(data.len()));
    (data.subset(b), data.subset(a))
}

fn default_true() -> bool {
    true
}

fn default_shift() -> f64 {
    1.0
}

fn default_eval() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub features: usize,
    pub per_user: usize,
    pub users: usize,
    pub task: ModelFamily,
    /// Label noise standard deviation.
    pub noise: f64,
    #[serde(default = "default_true")]
    pub iid: bool,
    /// Standard deviation of per-user feature-mean shifts when not IID.
    #[serde(default = "default_shift")]
    pub shift: f64,
    #[serde(default = "default_eval")]
    pub eval_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub users: Vec<Dataset>,
    pub eval: Dataset,
    /// Ground truth, bias last.
    pub theta_star: Vec<f64>,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Shared ground truth `θ* ~ N(0, I/d)`, standard normal features.
pub fn generate_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<SyntheticData> {
    if spec.features == 0 || spec.per_user == 0 || spec.users == 0 {
        return Err(FedsimError::Config("synthetic spec needs positive sizes".into()));
    }
    let d = spec.features;
    let scale = 1.0 / (d as f64).sqrt();
    let theta_star: Vec<f64> = (0..=d).map(|_| normal(rng) * scale).collect();
    let label = |x: &[f64], rng: &mut R| {
        let z = spec.task.score(&theta_star, x) + spec.noise * normal(rng);
        match spec.task {
            ModelFamily::LinearRegression => z,
            ModelFamily::LogisticRegression => f64::from(u8::from(z > 0.0)),
        }
    };
    let draw = |n: usize, shift: &[f64], rng: &mut R| {
        let mut out = Dataset::default();
        for _ in 0..n {
            let x: Vec<f64> = shift.iter().map(|s| s + normal(rng)).collect();
            out.y.push(label(&x, rng));
            out.x.push(x);
        }
        out
    };
    let zero = vec![0.0; d];
    let users = (0..spec.users)
        .map(|_| {
            let shift: Vec<f64> = if spec.iid {
                zero.clone()
            } else {
                (0..d).map(|_| spec.shift * normal(rng)).collect()
            };
            draw(spec.per_user, &shift, rng)
        })
        .collect();
    let eval = draw(spec.eval_size, &zero, rng);
    Ok(SyntheticData {
        users,
        eval,
        theta_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rows(n: usize) -> Dataset {
        Dataset::new((0..n).map(|i| vec![i as f64]).collect(), (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn exact_partition_is_disjoint() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let parts = partition(&rows(100), 10, &mut rng).unwrap();
        assert_eq!(parts.len(), 10);
        let mut seen: Vec<f64> = parts.iter().flat_map(|p| p.y.clone()).collect();
        assert!(parts.iter().all(|p| p.len() == 10));
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn remainder_dropped() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let parts = partition(&rows(101), 10, &mut rng).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), 100);
        assert!(matches!(
            partition(&rows(3), 5, &mut rng),
            Err(FedsimError::TooFewExamples { have: 3, need: 5 })
        ));
    }

    #[test]
    fn csv_parsing() {
        let d = read_csv("a,b,y\n1,2,3\n4.5,-1,0\n".as_bytes(), true).unwrap();
        assert_eq!(d.x, vec![vec![1.0, 2.0], vec![4.5, -1.0]]);
        assert_eq!(d.y, vec![3.0, 0.0]);
        assert!(matches!(
            read_csv("1,2,3\n4,x,6\n".as_bytes(), false),
            Err(FedsimError::MalformedCsv { line: 2, .. })
        ));
        assert!(matches!(
            read_csv("1,2,3\n4,5\n".as_bytes(), false),
            Err(FedsimError::MalformedCsv { line: 2, .. })
        ));
    }

    #[test]
    fn synthetic_shapes() {
        let spec = SyntheticSpec {
            features: 11,
            per_user: 400,
            users: 50,
            task: ModelFamily::LinearRegression,
            noise: 0.1,
            iid: true,
            shift: 1.0,
            eval_size: 100,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let s = generate_synthetic(&spec, &mut rng).unwrap();
        assert_eq!(s.users.len(), 50);
        assert!(s.users.iter().all(|u| u.len() == 400 && u.features() == 11));
        assert_eq!(s.theta_star.len(), 12);
        let again = generate_synthetic(&spec, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        assert_eq!(again.users[7].digest(), s.users[7].digest());
    }
}
