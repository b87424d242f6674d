//! On-disk draw stores.
//!
//! A store is a directory holding `meta.json` plus one CSV file per parameter
//! block. Every block file has a `draw` column followed by the flattened
//! block, one row per retained draw:
//!
//! | file          | columns                          | present when            |
//! |---------------|----------------------------------|-------------------------|
//! | `theta.csv`   | `theta_h`                        | always                  |
//! | `zjh.csv`     | `z_j_h`                          | always                  |
//! | `alpha.csv`   | `alpha`                          | always                  |
//! | `b.csv`       | `b_d_h` or `b_d_j_h`             | shared or full `B`      |
//! | `b1/b2/b3.csv`| `b1_d_r`, `b2_j_r`, `b3_h_r`     | low-rank `B`            |
//! | `e1/e2/e3.csv`| `e1_i_r`, `e2_j_r`, `e3_h_r`     | random effects          |
//! | `sigma2.csv`  | `sigma2_r`                       | random effects          |
//! | `alloc.csv`   | `c_i_j` (zero-based components)  | always                  |
//! | `zstar.csv`   | `z_i_j_h`                        | latents were kept       |
//! | `loglik.csv`  | `loglik`                         | always                  |
//!
//! Indices in column names are one-based. Floats are written in shortest
//! round-trip form so a reload is exact. Logistic stores use the same layout
//! with their own blocks and `family = "logistic"`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{sha256_hex, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::gibbs::ChainConfig;
use crate::model::{Coefficients, ModelConfig, ParamState};
use crate::tensor::{Array3, CpFactors};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub format_version: u32,
    /// `"psb"` or `"logistic"`.
    pub family: String,
    pub model: serde_json::Value,
    pub chain: ChainConfig,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub standardizer: Standardizer,
    pub subjects: usize,
    pub type_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub draws: usize,
}

/// SHA-256 of the canonical JSON of a model and chain configuration.
pub fn config_hash<M: Serialize>(model: &M, chain: &ChainConfig) -> String {
    let doc = serde_json::json!({ "model": model, "chain": chain });
    sha256_hex(doc.to_string().as_bytes())
}

impl StoreMeta {
    pub fn new<M: Serialize>(
        family: &str,
        model: &M,
        chain: &ChainConfig,
        data: &Dataset,
        standardizer: &Standardizer,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            family: family.to_string(),
            model: serde_json::to_value(model).expect("configuration serializes"),
            chain: chain.clone(),
            seed: chain.seed,
            config_hash: config_hash(model, chain),
            dataset_hash: data.hash(),
            standardizer: standardizer.clone(),
            subjects: data.n_subjects(),
            type_names: data.type_names().to_vec(),
            covariate_names: data.covariate_names().to_vec(),
            draws: 0,
        }
    }

    pub fn for_psb(model: &ModelConfig, chain: &ChainConfig, data: &Dataset, st: &Standardizer) -> Self {
        Self::new("psb", model, chain, data, st)
    }

    pub fn psb_model(&self) -> Result<ModelConfig> {
        if self.family != "psb" {
            return Err(Error::input(format!("store holds a {} fit, not psb", self.family)));
        }
        Ok(serde_json::from_value(self.model.clone())?)
    }

    pub fn n_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("meta.json"))?;
        let meta: StoreMeta = serde_json::from_str(&text)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::input(format!(
                "store format version {} unsupported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        Ok(meta)
    }
}

/// A named block: column names plus one row of values per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Block {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["draw".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (t, row) in self.rows.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let columns: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            if rec.len() != columns.len() + 1 {
                return Err(Error::input_at(line, format!("{} fields, expected {}", rec.len(), columns.len() + 1)));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|_| Error::input_at(line, format!("bad number {s:?} in {}", path.display()))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }
}

pub(crate) fn names1(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|a| format!("{prefix}_{a}")).collect()
}

pub(crate) fn names2(prefix: &str, n1: usize, n2: usize) -> Vec<String> {
    let mut v = Vec::with_capacity(n1 * n2);
    for a in 1..=n1 {
        for b in 1..=n2 {
            v.push(format!("{prefix}_{a}_{b}"));
        }
    }
    v
}

fn names3(prefix: &str, n1: usize, n2: usize, n3: usize) -> Vec<String> {
    let mut v = Vec::with_capacity(n1 * n2 * n3);
    for a in 1..=n1 {
        for b in 1..=n2 {
            for c in 1..=n3 {
                v.push(format!("{prefix}_{a}_{b}_{c}"));
            }
        }
    }
    v
}

/// Row-major flattening of a matrix.
pub(crate) fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        v.extend(m.row(i).iter());
    }
    v
}

pub(crate) fn unflat(v: &[f64], r: usize, c: usize) -> Result<DMatrix<f64>> {
    if v.len() != r * c {
        return Err(Error::input(format!("block has {} values, expected {r} x {c}", v.len())));
    }
    Ok(DMatrix::from_row_slice(r, c, v))
}

/// Retained draws of one chain together with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawStore {
    meta: StoreMeta,
    draws: Vec<ParamState>,
    loglik: Vec<f64>,
}

impl DrawStore {
    pub fn new(mut meta: StoreMeta, draws: Vec<ParamState>, loglik: Vec<f64>) -> Self {
        meta.draws = draws.len();
        Self { meta, draws, loglik }
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn draws(&self) -> &[ParamState] {
        &self.draws
    }

    /// Training log-likelihood of each retained draw.
    pub fn loglik(&self) -> &[f64] {
        &self.loglik
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.meta.standardizer
    }

    pub fn model(&self) -> Result<ModelConfig> {
        self.meta.psb_model()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let model = self.model()?;
        let (n_sub, n_types, d, h) =
            (self.meta.subjects, self.meta.n_types(), self.meta.n_covariates(), model.h);
        self.meta.write(dir)?;
        let mut blocks: Vec<(&str, Block)> = vec![
            ("theta", Block::new(names1("theta", h))),
            ("zjh", Block::new(names2("z", n_types, h))),
            ("alpha", Block::new(vec!["alpha".into()])),
            ("alloc", Block::new(names2("c", n_sub, n_types))),
            ("loglik", Block::new(vec!["loglik".into()])),
        ];
        let mut extra: Vec<(&str, Block)> = Vec::new();
        match model.coef {
            crate::model::CoefStructure::None => {}
            crate::model::CoefStructure::SharedTypes => extra.push(("b", Block::new(names2("b", d, h)))),
            crate::model::CoefStructure::Full => extra.push(("b", Block::new(names3("b", d, n_types, h)))),
            crate::model::CoefStructure::LowRank(r) => {
                extra.push(("b1", Block::new(names2("b1", d, r))));
                extra.push(("b2", Block::new(names2("b2", n_types, r))));
                extra.push(("b3", Block::new(names2("b3", h, r))));
            }
        }
        if let crate::model::ErrorStructure::LowRank(r) = model.error {
            extra.push(("e1", Block::new(names2("e1", n_sub, r))));
            extra.push(("e2", Block::new(names2("e2", n_types, r))));
            extra.push(("e3", Block::new(names2("e3", h, r))));
            extra.push(("sigma2", Block::new(names1("sigma2", r))));
        }
        if self.meta.chain.store_latents {
            extra.push(("zstar", Block::new(names3("z", n_sub, n_types, h))));
        }
        blocks.extend(extra);

        for (t, s) in self.draws.iter().enumerate() {
            for (name, block) in blocks.iter_mut() {
                let row = match *name {
                    "theta" => s.theta.clone(),
                    "zjh" => flat(&s.zjh),
                    "alpha" => vec![s.alpha],
                    "alloc" => s.alloc.iter().map(|&c| c as f64).collect(),
                    "loglik" => vec![self.loglik.get(t).copied().unwrap_or(f64::NAN)],
                    "b" => match &s.coef {
                        Coefficients::Shared(m) => flat(m),
                        Coefficients::Full(a) => a.as_slice().to_vec(),
                        _ => return Err(Error::Invariant("coefficient form does not match config".into())),
                    },
                    "b1" | "b2" | "b3" => match &s.coef {
                        Coefficients::LowRank(f) => flat(pick(f, name)),
                        _ => return Err(Error::Invariant("coefficient form does not match config".into())),
                    },
                    "e1" | "e2" | "e3" => match &s.effects {
                        Some(f) => flat(pick(f, name)),
                        None => return Err(Error::Invariant("effects missing from draw".into())),
                    },
                    "sigma2" => s.sigma2.clone(),
                    "zstar" => s.zstar.as_slice().to_vec(),
                    _ => unreachable!("unknown block"),
                };
                block.rows.push(row);
            }
        }
        for (name, block) in &blocks {
            block.write(&dir.join(format!("{name}.csv")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = StoreMeta::read(dir)?;
        let model = meta.psb_model()?;
        let (n_sub, n_types, d, h) = (meta.subjects, meta.n_types(), meta.n_covariates(), model.h);
        let read = |name: &str| Block::read(&dir.join(format!("{name}.csv")));
        let theta = read("theta")?;
        let zjh = read("zjh")?;
        let alpha = read("alpha")?;
        let alloc = read("alloc")?;
        let loglik = read("loglik")?;
        let coef_blocks: Vec<Block> = match model.coef {
            crate::model::CoefStructure::None => vec![],
            crate::model::CoefStructure::SharedTypes | crate::model::CoefStructure::Full => vec![read("b")?],
            crate::model::CoefStructure::LowRank(_) => vec![read("b1")?, read("b2")?, read("b3")?],
        };
        let eff_blocks: Vec<Block> = match model.error {
            crate::model::ErrorStructure::None => vec![],
            crate::model::ErrorStructure::LowRank(_) => {
                vec![read("e1")?, read("e2")?, read("e3")?, read("sigma2")?]
            }
        };
        let zstar = if meta.chain.store_latents { Some(read("zstar")?) } else { None };
        let n = theta.rows.len();
        let mut all = vec![&theta, &zjh, &alpha, &alloc, &loglik];
        all.extend(coef_blocks.iter());
        all.extend(eff_blocks.iter());
        all.extend(zstar.iter());
        if all.iter().any(|b| b.rows.len() != n) || n != meta.draws {
            return Err(Error::input("blocks disagree on the number of draws"));
        }

        let mut draws = Vec::with_capacity(n);
        for t in 0..n {
            let coef = match model.coef {
                crate::model::CoefStructure::None => Coefficients::None,
                crate::model::CoefStructure::SharedTypes => {
                    Coefficients::Shared(unflat(&coef_blocks[0].rows[t], d, h)?)
                }
                crate::model::CoefStructure::Full => {
                    Coefficients::Full(Array3::from_vec([d, n_types, h], coef_blocks[0].rows[t].clone())?)
                }
                crate::model::CoefStructure::LowRank(r) => Coefficients::LowRank(CpFactors::new(
                    unflat(&coef_blocks[0].rows[t], d, r)?,
                    unflat(&coef_blocks[1].rows[t], n_types, r)?,
                    unflat(&coef_blocks[2].rows[t], h, r)?,
                )?),
            };
            let (effects, sigma2) = match model.error {
                crate::model::ErrorStructure::None => (None, Vec::new()),
                crate::model::ErrorStructure::LowRank(r) => (
                    Some(CpFactors::new(
                        unflat(&eff_blocks[0].rows[t], n_sub, r)?,
                        unflat(&eff_blocks[1].rows[t], n_types, r)?,
                        unflat(&eff_blocks[2].rows[t], h, r)?,
                    )?),
                    eff_blocks[3].rows[t].clone(),
                ),
            };
            let zs = match &zstar {
                Some(b) => Array3::from_vec([n_sub, n_types, h], b.rows[t].clone())?,
                None => Array3::zeros(0, 0, 0),
            };
            let state = ParamState {
                theta: theta.rows[t].clone(),
                zjh: unflat(&zjh.rows[t], n_types, h)?,
                alpha: alpha.rows[t][0],
                coef,
                effects,
                sigma2,
                alloc: alloc.rows[t].iter().map(|&c| c as usize).collect(),
                zstar: zs,
            };
            state.check_invariants()?;
            draws.push(state);
        }
        let loglik = loglik.rows.iter().map(|r| r[0]).collect();
        Ok(Self { meta, draws, loglik })
    }
}

fn pick<'a>(f: &'a CpFactors, name: &str) -> &'a DMatrix<f64> {
    match name.as_bytes()[1] {
        b'1' => &f.f1,
        b'2' => &f.f2,
        _ => &f.f3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::run_chain;
    use crate::model::{CoefStructure, ErrorStructure};
    use crate::sampling::RngHandle;
    use rand::Rng;

    fn toy() -> Dataset {
        let mut rng = RngHandle::new(3);
        let x = DMatrix::from_fn(6, 2, |_, _| rng.random::<f64>());
        let n = vec![8u64; 12];
        let y = n.iter().map(|&n| rng.random_range(0..=n)).collect();
        Dataset::from_parts(None, None, None, y, n, x).unwrap()
    }

    #[test]
    fn round_trip_every_structure() {
        let data = toy();
        for (coef, err, latents) in [
            (CoefStructure::LowRank(2), ErrorStructure::LowRank(1), false),
            (CoefStructure::Full, ErrorStructure::None, true),
            (CoefStructure::SharedTypes, ErrorStructure::LowRank(2), false),
            (CoefStructure::None, ErrorStructure::None, false),
        ] {
            let model = ModelConfig::new(4, coef, err);
            let chain = ChainConfig { iterations: 12, burn_in: 6, thin: 2, seed: 5, store_latents: latents };
            let store = run_chain(&chain, &model, &data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            store.save(dir.path()).unwrap();
            let back = DrawStore::load(dir.path()).unwrap();
            assert_eq!(back, store, "{}", model.label());
        }
    }

    #[test]
    fn rejects_other_versions_and_families() {
        let data = toy();
        let model = ModelConfig::new(3, CoefStructure::None, ErrorStructure::None);
        let store = run_chain(&ChainConfig::new(4, 2, 1), &model, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let mut meta = store.meta().clone();
        meta.format_version = 99;
        fs::write(dir.path().join("meta.json"), serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(DrawStore::load(dir.path()).is_err());
        meta.format_version = FORMAT_VERSION;
        meta.family = "logistic".into();
        fs::write(dir.path().join("meta.json"), serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(DrawStore::load(dir.path()).is_err());
    }

    #[test]
    fn meta_records_hashes() {
        let data = toy();
        let model = ModelConfig::default();
        let chain = ChainConfig::new(4, 2, 11);
        let m = StoreMeta::for_psb(&model, &chain, &data, &Standardizer::identity(2));
        assert_eq!(m.seed, 11);
        assert_eq!(m.dataset_hash, data.hash());
        assert_eq!(m.config_hash.len(), 64);
        let other = StoreMeta::for_psb(&model, &ChainConfig::new(4, 2, 12), &data, &Standardizer::identity(2));
        assert_ne!(m.config_hash, other.config_hash);
    }
}
