//! Dataset generation, feasibility filtering and on-disk format.
//!
//! A dataset directory holds `manifest.json` and `tensors.bin`. The binary
//! file is the concatenation of the arrays listed in the manifest, each
//! stored row-major as little-endian `f64`; complex arrays interleave
//! `(re, im)`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::linalg::{CMat, CVec, C64};
use crate::solver::{power_weights, run_greedy, SolverConfig};

use super::{dft_codebook, instance_rng, sample_scenario, Codebook, GenConfig, SampledChannels, ScenarioInstance};

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.bin";
/// Instances drawn per parallel chunk during generation.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub seed: u64,
    pub instances: Vec<ScenarioInstance>,
    /// Stream index each kept instance was drawn from.
    pub source_index: Vec<u64>,
    /// Candidates drawn before `count` instances passed the filter.
    pub attempted: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn rejection_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            1.0 - self.instances.len() as f64 / self.attempted as f64
        }
    }

    /// Sub-dataset with the given instance positions.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            config: self.config.clone(),
            seed: self.seed,
            instances: idx.iter().map(|&k| self.instances[k].clone()).collect(),
            source_index: idx.iter().map(|&k| self.source_index[k]).collect(),
            attempted: self.attempted,
        }
    }

    /// Contiguous `k`-fold split: returns `(train, test)` positions of fold
    /// `fold`.
    pub fn fold_indices(&self, k: usize, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let n = self.len();
        if k < 2 || fold >= k || n < k {
            return Err(config_err(format!("invalid fold {fold} of {k} for {n} instances")));
        }
        let lo = fold * n / k;
        let hi = (fold + 1) * n / k;
        let test = (lo..hi).collect();
        let train = (0..lo).chain(hi..n).collect();
        Ok((train, test))
    }

    pub fn codebook(&self) -> Codebook {
        dft_codebook(self.config.m_x, self.config.m_y)
    }
}

/// True when the perfect-CSI greedy pipeline finds a solution with
/// `w^T p ≤ P_max` before projection.
pub fn is_feasible(inst: &ScenarioInstance, codebook: &Codebook, m_rf: usize, l_rf: usize, cfg: &SolverConfig) -> bool {
    let Ok((sol, _)) = run_greedy(&inst.true_cov, &inst.sinr_targets, codebook, m_rf, l_rf, inst.p_max, cfg) else {
        return false;
    };
    if !sol.feasible {
        return false;
    }
    let w = power_weights(&sol.analog.matrix, &sol.b, cfg.weight_mode);
    let total: f64 = sol.p_raw.iter().zip(&w).map(|(p, w)| p * w).sum();
    total <= inst.p_max
}

/// Keeps the instances passing [`is_feasible`]; returns them with the
/// rejection rate.
pub fn feasibility_filter(
    instances: Vec<ScenarioInstance>,
    codebook: &Codebook,
    m_rf: usize,
    l_rf: usize,
    cfg: &SolverConfig,
) -> (Vec<ScenarioInstance>, f64) {
    let total = instances.len();
    let kept: Vec<_> = instances.into_par_iter().filter(|s| is_feasible(s, codebook, m_rf, l_rf, cfg)).collect();
    let rate = if total == 0 { 0.0 } else { 1.0 - kept.len() as f64 / total as f64 };
    (kept, rate)
}

/// Draws instances from per-index streams of `seed` until `cfg.count`
/// pass the feasibility filter. Instance `k` belongs to group
/// `k mod groups`.
pub fn generate(cfg: &GenConfig, seed: u64, solver: &SolverConfig) -> Result<Dataset> {
    cfg.validate()?;
    let codebook = dft_codebook(cfg.m_x, cfg.m_y);
    let max_attempts = 1000 * cfg.count.max(1);
    let mut instances = Vec::with_capacity(cfg.count);
    let mut source_index = Vec::with_capacity(cfg.count);
    let mut next = 0usize;
    let mut attempted = 0usize;
    while instances.len() < cfg.count {
        if next >= max_attempts {
            return Err(config_err(format!(
                "only {} of {} instances feasible after {max_attempts} draws",
                instances.len(),
                cfg.count
            )));
        }
        let chunk: Vec<Result<Option<ScenarioInstance>>> = (next..next + CHUNK)
            .into_par_iter()
            .map(|k| {
                let group = cfg.group_of(k as u64);
                let inst = sample_scenario(cfg, group, &mut instance_rng(seed, k as u64))?;
                let ok = is_feasible(&inst, &codebook, cfg.rf_chains, cfg.filter_steps, solver);
                Ok(ok.then_some(inst))
            })
            .collect();
        for (offset, item) in chunk.into_iter().enumerate() {
            if instances.len() == cfg.count {
                break;
            }
            attempted += 1;
            if let Some(inst) = item? {
                instances.push(inst);
                source_index.push((next + offset) as u64);
            }
        }
        next += CHUNK;
    }
    log::info!(
        "generated {} instances from {attempted} draws (rejection rate {:.4})",
        instances.len(),
        1.0 - instances.len() as f64 / attempted.max(1) as f64
    );
    Ok(Dataset { config: cfg.clone(), seed, instances, source_index, attempted })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    /// `complex128` or `float64`.
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub m_x: usize,
    pub m_y: usize,
    pub users: usize,
    pub count: usize,
    pub samples: usize,
    pub attempted: usize,
    pub rejection_rate: f64,
    pub seed: u64,
    pub config: GenConfig,
    pub arrays: Vec<ArraySpec>,
}

fn array_specs(n: usize, users: usize, m: usize, samples: usize) -> Vec<ArraySpec> {
    let spec = |name: &str, dtype: &str, shape: Vec<usize>| ArraySpec { name: name.into(), dtype: dtype.into(), shape };
    let mut v =
        vec![spec("true_cov", "complex128", vec![n, users, m, m]), spec("est_cov", "complex128", vec![n, users, m, m])];
    if samples > 0 {
        v.push(spec("true_h", "complex128", vec![n, users, samples, m]));
        v.push(spec("est_h", "complex128", vec![n, users, samples, m]));
    }
    v.extend([
        spec("sinr_targets", "float64", vec![n, users]),
        spec("side_info", "float64", vec![n, users]),
        spec("p_max", "float64", vec![n]),
        spec("group_id", "float64", vec![n]),
        spec("source_index", "float64", vec![n]),
    ]);
    v
}

fn push_c(out: &mut Vec<u8>, z: C64) {
    out.extend_from_slice(&z.re.to_le_bytes());
    out.extend_from_slice(&z.im.to_le_bytes());
}

fn push_mat(out: &mut Vec<u8>, m: &CMat) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            push_c(out, m[(r, c)]);
        }
    }
}

pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = ds.len();
    let users = ds.config.users;
    let m = ds.config.antennas();
    let samples = ds.instances.first().and_then(|s| s.samples.as_ref()).map_or(0, SampledChannels::num_samples);
    let mut bytes = Vec::new();
    for inst in &ds.instances {
        inst.true_cov.iter().for_each(|r| push_mat(&mut bytes, r));
    }
    for inst in &ds.instances {
        inst.est_cov.iter().for_each(|r| push_mat(&mut bytes, r));
    }
    if samples > 0 {
        for est in [false, true] {
            for inst in &ds.instances {
                let s = inst.samples.as_ref().ok_or_else(|| Error::Format("missing channel samples".into()))?;
                let hs = if est { &s.est_h } else { &s.true_h };
                for h in hs.iter().flatten() {
                    h.iter().for_each(|&z| push_c(&mut bytes, z));
                }
            }
        }
    }
    let mut push_r = |x: f64| bytes.extend_from_slice(&x.to_le_bytes());
    ds.instances.iter().flat_map(|s| &s.sinr_targets).for_each(|&x| push_r(x));
    ds.instances.iter().flat_map(|s| &s.side_info).for_each(|&x| push_r(x));
    ds.instances.iter().for_each(|s| push_r(s.p_max));
    ds.instances.iter().for_each(|s| push_r(s.group_id as f64));
    ds.source_index.iter().for_each(|&k| push_r(k as f64));

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        m_x: ds.config.m_x,
        m_y: ds.config.m_y,
        users,
        count: n,
        samples,
        attempted: ds.attempted,
        rejection_rate: ds.rejection_rate(),
        seed: ds.seed,
        config: ds.config.clone(),
        arrays: array_specs(n, users, m, samples),
    };
    let mut w = BufWriter::new(fs::File::create(dir.join(TENSORS))?);
    w.write_all(&bytes)?;
    w.flush()?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn f64(&mut self) -> Result<f64> {
        let bytes =
            self.data.get(self.pos..self.pos + 8).ok_or_else(|| Error::Format("tensors.bin is truncated".into()))?;
        self.pos += 8;
        Ok(f64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    fn c64(&mut self) -> Result<C64> {
        Ok(C64::new(self.f64()?, self.f64()?))
    }

    fn mat(&mut self, m: usize) -> Result<CMat> {
        let mut out = CMat::zeros(m, m);
        for r in 0..m {
            for c in 0..m {
                out[(r, c)] = self.c64()?;
            }
        }
        Ok(out)
    }

    fn vec(&mut self, m: usize) -> Result<CVec> {
        let v: Result<Vec<C64>> = (0..m).map(|_| self.c64()).collect();
        Ok(CVec::from_vec(v?))
    }
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported schema version {}", manifest.schema_version)));
    }
    let (n, users, s) = (manifest.count, manifest.users, manifest.samples);
    let m = manifest.m_x * manifest.m_y;
    if manifest.arrays != array_specs(n, users, m, s) {
        return Err(Error::Format("manifest array list does not match its dimensions".into()));
    }
    let data = fs::read(dir.join(TENSORS))?;
    let mut rd = Reader { data: &data, pos: 0 };
    let covs = |rd: &mut Reader| -> Result<Vec<Vec<CMat>>> {
        (0..n).map(|_| (0..users).map(|_| rd.mat(m)).collect()).collect()
    };
    let true_cov = covs(&mut rd)?;
    let est_cov = covs(&mut rd)?;
    let chans = |rd: &mut Reader| -> Result<Vec<Vec<Vec<CVec>>>> {
        (0..n).map(|_| (0..users).map(|_| (0..s).map(|_| rd.vec(m)).collect()).collect()).collect()
    };
    let (true_h, est_h) = if s > 0 { (chans(&mut rd)?, chans(&mut rd)?) } else { (Vec::new(), Vec::new()) };
    let reals = |rd: &mut Reader, len: usize| -> Result<Vec<f64>> { (0..len).map(|_| rd.f64()).collect() };
    let targets = reals(&mut rd, n * users)?;
    let side = reals(&mut rd, n * users)?;
    let p_max = reals(&mut rd, n)?;
    let groups = reals(&mut rd, n)?;
    let source = reals(&mut rd, n)?;
    if rd.pos != data.len() {
        return Err(Error::Format("tensors.bin has trailing bytes".into()));
    }
    let mut instances = Vec::with_capacity(n);
    let mut true_h = true_h.into_iter();
    let mut est_h = est_h.into_iter();
    for (k, (tc, ec)) in true_cov.into_iter().zip(est_cov).enumerate() {
        let samples = if s > 0 {
            Some(SampledChannels { true_h: true_h.next().expect("n entries"), est_h: est_h.next().expect("n entries") })
        } else {
            None
        };
        instances.push(ScenarioInstance {
            true_cov: tc,
            est_cov: ec,
            samples,
            sinr_targets: targets[k * users..(k + 1) * users].to_vec(),
            side_info: side[k * users..(k + 1) * users].to_vec(),
            p_max: p_max[k],
            group_id: groups[k] as usize,
        });
    }
    Ok(Dataset {
        config: manifest.config,
        seed: manifest.seed,
        instances,
        source_index: source.into_iter().map(|x| x as u64).collect(),
        attempted: manifest.attempted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{CsiMode, GroupDef};

    fn small_config() -> GenConfig {
        GenConfig {
            m_x: 2,
            m_y: 2,
            users: 2,
            rf_chains: 2,
            filter_steps: 4,
            sinr_db: [5.0, 10.0],
            count: 12,
            groups: vec![GroupDef { side_info: [10.0, 10.0] }, GroupDef { side_info: [24.0, 24.0] }],
            ..GenConfig::default()
        }
    }

    #[test]
    fn vanishing_targets_keep_everything() {
        let cfg = GenConfig { sinr_db: [-80.0, -80.0], ..small_config() };
        let ds = generate(&cfg, 3, &SolverConfig::default()).unwrap();
        assert_eq!(ds.attempted, cfg.count);
        assert_eq!(ds.rejection_rate(), 0.0);
    }

    #[test]
    fn impossible_targets_rejected() {
        let cfg = GenConfig { sinr_db: [60.0, 60.0], ..small_config() };
        let codebook = dft_codebook(2, 2);
        let insts: Vec<_> = (0..10).map(|k| sample_scenario(&cfg, 0, &mut instance_rng(1, k)).unwrap()).collect();
        let (kept, rate) = feasibility_filter(insts, &codebook, 2, 4, &SolverConfig::default());
        assert!(kept.is_empty());
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let cfg = small_config();
        let a = generate(&cfg, 5, &SolverConfig::default()).unwrap();
        let b = generate(&cfg, 5, &SolverConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        for (s, &k) in a.instances.iter().zip(&a.source_index) {
            assert_eq!(s.group_id, (k % 2) as usize);
        }
        let dir = tempfile::tempdir().unwrap();
        save(&a, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back, a);
        let dir2 = tempfile::tempdir().unwrap();
        save(&b, dir2.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(TENSORS)).unwrap(), fs::read(dir2.path().join(TENSORS)).unwrap());
    }

    #[test]
    fn sampled_mode_round_trips() {
        let cfg = GenConfig { csi_mode: CsiMode::StatisticalInstantaneous { samples: 3 }, count: 4, ..small_config() };
        let ds = generate(&cfg, 9, &SolverConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn truncated_tensors_rejected() {
        let ds = generate(&GenConfig { count: 2, ..small_config() }, 1, &SolverConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let path = dir.path().join(TENSORS);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn folds_are_contiguous_and_disjoint() {
        let ds = generate(&GenConfig { count: 10, ..small_config() }, 2, &SolverConfig::default()).unwrap();
        let (train, test) = ds.fold_indices(2, 1).unwrap();
        assert_eq!(test, vec![5, 6, 7, 8, 9]);
        assert_eq!(train, vec![0, 1, 2, 3, 4]);
        assert!(ds.fold_indices(1, 0).is_err());
    }
}
