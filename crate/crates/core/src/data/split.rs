use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::ClassCatalog;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// How split sizes are determined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitMode {
    /// `test` of all samples go to test, then `val_from_train` of the
    /// remainder to validation. Sizes are floored; leftovers go to train.
    Fractions { test: f64, val_from_train: f64 },
    /// Exact sizes; they must add up to the number of samples.
    Counts {
        train: usize,
        val: usize,
        test: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

/// Input to the splitter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitItem {
    pub path: String,
    pub label: usize,
}

/// Deterministic train/val/test assignment of source paths.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub stratified: bool,
    /// Realised `[train, val, test]` fractions.
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn floor_eps(x: f64) -> usize {
    (x + 1e-9).floor() as usize
}

fn target_sizes(n: usize, mode: SplitMode) -> Result<(usize, usize, usize)> {
    match mode {
        SplitMode::Fractions {
            test,
            val_from_train,
        } => {
            if !(test > 0.0 && test < 1.0) {
                return Err(Error::Config(format!(
                    "test fraction {test} must be in (0, 1)"
                )));
            }
            if !(0.0..1.0).contains(&val_from_train) {
                return Err(Error::Config(format!(
                    "validation fraction {val_from_train} must be in [0, 1)"
                )));
            }
            let n_test = floor_eps(n as f64 * test);
            let rest = n - n_test;
            let n_val = floor_eps(rest as f64 * val_from_train);
            Ok((rest - n_val, n_val, n_test))
        }
        SplitMode::Counts { train, val, test } => {
            let total = train + val + test;
            if total != n {
                return Err(Error::Config(format!(
                    "split counts {train}+{val}+{test} = {total} do not match the {n} available samples"
                )));
            }
            Ok((train, val, test))
        }
    }
}

/// Largest-remainder allocation of `total` over classes proportional to
/// `weights`, never exceeding `capacity`.
fn allocate(total: usize, weights: &[usize], capacity: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 || total == 0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights
        .iter()
        .map(|&w| w as f64 * total as f64 / sum as f64)
        .collect();
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(capacity)
        .map(|(&q, &c)| (q.floor() as usize).min(c))
        .collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = total - alloc.iter().sum::<usize>();
    while remaining > 0 {
        let before = remaining;
        for &k in &order {
            if remaining > 0 && alloc[k] < capacity[k] {
                alloc[k] += 1;
                remaining -= 1;
            }
        }
        if remaining == before {
            break;
        }
    }
    alloc
}

/// Splits `items` into train/val/test. The same seed always produces the
/// same manifest.
pub fn split_dataset(
    items: &[SplitItem],
    mode: SplitMode,
    seed: u64,
    stratified: bool,
) -> Result<SplitManifest> {
    let n = items.len();
    if n == 0 {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let (n_train, n_val, n_test) = target_sizes(n, mode)?;
    let mut manifest = SplitManifest {
        seed,
        stratified,
        fractions: [
            n_train as f64 / n as f64,
            n_val as f64 / n as f64,
            n_test as f64 / n as f64,
        ],
        train: Vec::with_capacity(n_train),
        val: Vec::with_capacity(n_val),
        test: Vec::with_capacity(n_test),
    };

    let assign = |paths: Vec<&str>, n_val: usize, n_test: usize, m: &mut SplitManifest| {
        let (test, rest) = paths.split_at(n_test);
        let (val, train) = rest.split_at(n_val);
        m.test.extend(test.iter().map(|s| s.to_string()));
        m.val.extend(val.iter().map(|s| s.to_string()));
        m.train.extend(train.iter().map(|s| s.to_string()));
    };

    if stratified {
        let classes = items.iter().map(|i| i.label).max().unwrap_or(0) + 1;
        let mut per_class: Vec<Vec<&str>> = vec![Vec::new(); classes];
        for item in items {
            per_class[item.label].push(&item.path);
        }
        let sizes: Vec<usize> = per_class.iter().map(Vec::len).collect();
        let test_alloc = allocate(n_test, &sizes, &sizes);
        let left: Vec<usize> = sizes.iter().zip(&test_alloc).map(|(s, t)| s - t).collect();
        let val_alloc = allocate(n_val, &sizes, &left);
        for (k, mut paths) in per_class.into_iter().enumerate() {
            paths.shuffle(&mut rng_for(seed, &[k as u64]));
            assign(paths, val_alloc[k], test_alloc[k], &mut manifest);
        }
    } else {
        let mut paths: Vec<&str> = items.iter().map(|i| i.path.as_str()).collect();
        paths.shuffle(&mut rng_for(seed, &[u64::MAX]));
        assign(paths, n_val, n_test, &mut manifest);
    }
    Ok(manifest)
}

impl SplitManifest {
    pub fn get(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(path, label)` pairs of a split, labels resolved from the leading
    /// directory component.
    pub fn items(&self, split: SplitName, catalog: &ClassCatalog) -> Result<Vec<(String, usize)>> {
        self.get(split)
            .iter()
            .map(|p| {
                let class = p.split('/').next().unwrap_or_default();
                catalog
                    .index_of(class)
                    .map(|l| (p.clone(), l))
                    .ok_or_else(|| {
                        Error::Data(format!("{p}: class {class:?} is not in the dataset"))
                    })
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let [a, b, c] = self.fractions;
        let mut out = format!(
            "# seed={} stratified={} fractions={a},{b},{c}\n",
            self.seed, self.stratified
        );
        for split in SplitName::ALL {
            for p in self.get(split) {
                out.push_str(split.as_str());
                out.push('\t');
                out.push_str(p);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|h| h.strip_prefix("# "))
            .ok_or_else(|| Error::Format("manifest header line is missing".into()))?;
        let mut seed = None;
        let mut stratified = None;
        let mut fractions = None;
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            let bad = || Error::Format(format!("bad header value {field:?}"));
            match k {
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
                "stratified" => stratified = Some(v.parse::<bool>().map_err(|_| bad())?),
                "fractions" => {
                    let f: Vec<f64> = v
                        .split(',')
                        .map(|x| x.parse::<f64>().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    fractions = Some(<[f64; 3]>::try_from(f).map_err(|_| bad())?);
                }
                _ => return Err(Error::Format(format!("unknown header field {k:?}"))),
            }
        }
        let mut m = SplitManifest {
            seed: seed.ok_or_else(|| Error::Format("header lacks seed".into()))?,
            stratified: stratified.unwrap_or(false),
            fractions: fractions.ok_or_else(|| Error::Format("header lacks fractions".into()))?,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for line in lines.filter(|l| !l.is_empty()) {
            let (split, path) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            let list = match split.parse()? {
                SplitName::Train => &mut m.train,
                SplitName::Val => &mut m.val,
                SplitName::Test => &mut m.test,
            };
            list.push(path.to_string());
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
