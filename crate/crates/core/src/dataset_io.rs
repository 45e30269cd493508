//! Datasets of (initial value, reference terminal value) pairs and the `ADANN1`
//! binary container used for datasets and model checkpoints.
//!
//! Container layout:
//!
//! ```text
//! b"ADANN1" | version: u32 LE | header length: u64 LE | header (UTF-8 JSON) | payload
//! ```
//!
//! The header lists every tensor with its name, dtype, shape, and offset/length (in
//! elements) into the payload, which is a run of little-endian binary64 values.
//! Matrices are stored row-major.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::base_model::BaseWeights;
use crate::difference_model::{Layer, MlpWeights};
use crate::error::{check_dim, invalid, Error, Result};
use crate::pde_problems::{InitialLaw, PreparedReference, ProblemSpec, ReferenceSolver};
use crate::rng::{split, Domain};

/// Inputs and targets as columns: `inputs` is `d_in x n`, `targets` is `d_out x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl SampleSet {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        check_dim("sample count", inputs.ncols(), targets.ncols())?;
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, range: Range<usize>) -> SampleSet {
        let n = range.end - range.start;
        Self {
            inputs: self.inputs.columns(range.start, n).into_owned(),
            targets: self.targets.columns(range.start, n).into_owned(),
        }
    }

    /// Copies of the listed columns, in order (indices may repeat).
    pub fn gather(&self, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.inputs.select_columns(idx), self.targets.select_columns(idx))
    }
}

/// Generated samples. `inputs` holds initial values on the fine reference grid;
/// `targets` holds reference terminal values on the coarse evaluation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub problem: ProblemSpec,
    pub law: InitialLaw,
    pub solver: ReferenceSolver,
    pub seed: u64,
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

// Samples per generation work item; fixed so the content is independent of the
// worker count.
const GENERATION_CHUNK: usize = 64;

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    problem: ProblemSpec,
    law: InitialLaw,
    reference_solver: ReferenceSolver,
    seed: u64,
    samples: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn restriction(&self) -> Result<Vec<usize>> {
        let fine = self.problem.with_points(self.solver.fine_points)?;
        crate::pde_problems::restriction_indices(&self.problem.grid, &fine.grid)
    }

    /// Model-ready pairs: inputs restricted to the coarse grid.
    pub fn coarse_samples(&self) -> Result<SampleSet> {
        let idx = self.restriction()?;
        SampleSet::new(self.inputs.select_rows(&idx), self.targets.clone())
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = DatasetMeta {
            problem: self.problem,
            law: self.law,
            reference_solver: self.solver,
            seed: self.seed,
            samples: self.len(),
        };
        let mut c = Container::default();
        c.metadata.insert("kind".into(), Value::from("dataset"));
        c.metadata.insert("dataset".into(), serde_json::to_value(meta)?);
        // column-major d x n is row-major n x d
        c.push("inputs", vec![self.len(), self.inputs.nrows()], self.inputs.as_slice().to_vec());
        c.push("targets", vec![self.len(), self.targets.nrows()], self.targets.as_slice().to_vec());
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.metadata.get("kind") != Some(&Value::from("dataset")) {
            return Err(Error::Format("container does not hold a dataset".into()));
        }
        let meta: DatasetMeta = serde_json::from_value(
            c.metadata
                .get("dataset")
                .cloned()
                .ok_or_else(|| Error::Format("missing dataset metadata".into()))?,
        )?;
        let matrix = |name: &str| -> Result<DMatrix<f64>> {
            let t = c.tensor(name)?;
            if t.shape.len() != 2 || t.shape[0] != meta.samples {
                return Err(Error::Format(format!("tensor '{name}' has shape {:?}", t.shape)));
            }
            Ok(DMatrix::from_column_slice(t.shape[1], t.shape[0], &t.data))
        };
        Ok(Self {
            problem: meta.problem,
            law: meta.law,
            solver: meta.reference_solver,
            seed: meta.seed,
            inputs: matrix("inputs")?,
            targets: matrix("targets")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Draws `n` initial values from `law` on the fine grid and solves each to the
/// terminal time. Sample `k` uses stream `k` of the initial-condition domain.
pub fn generate_dataset(
    problem: &ProblemSpec,
    law: &InitialLaw,
    solver: ReferenceSolver,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("dataset needs at least one sample"));
    }
    let reference = PreparedReference::new(problem, solver)?;
    let sampler = law.sampler(&reference.fine_problem().grid)?;
    let d_fine = sampler.dim();
    let d = problem.grid.unknowns();
    let starts: Vec<usize> = (0..n).step_by(GENERATION_CHUNK).collect();
    let chunks: Vec<(DMatrix<f64>, DMatrix<f64>)> = starts
        .par_iter()
        .map(|&s| {
            let w = GENERATION_CHUNK.min(n - s);
            let mut g = DMatrix::zeros(d_fine, w);
            for j in 0..w {
                let mut rng = split(seed, Domain::InitialCondition, (s + j) as u64);
                g.set_column(j, &sampler.sample(&mut rng));
            }
            let y = reference.solve(&g).map_err(|e| Error::Sample {
                index: s,
                source: Box::new(e),
            })?;
            Ok((g, y))
        })
        .collect::<Result<_>>()?;
    let mut inputs = DMatrix::zeros(d_fine, n);
    let mut targets = DMatrix::zeros(d, n);
    for (&s, (g, y)) in starts.iter().zip(&chunks) {
        inputs.columns_mut(s, g.ncols()).copy_from(g);
        targets.columns_mut(s, y.ncols()).copy_from(y);
    }
    Ok(Dataset {
        problem: *problem,
        law: *law,
        solver,
        seed,
        inputs,
        targets,
    })
}

/// Train / validation / selection / test fractions used by default.
pub const DEFAULT_SPLIT: [f64; 4] = [0.75, 0.0625, 0.0625, 0.125];

/// Train / validation / selection / test partition.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SampleSet,
    pub validation: SampleSet,
    pub selection: SampleSet,
    pub test: SampleSet,
}

/// Contiguous slices in generation order. The first three sizes are rounded
/// down; the test split takes the rest.
pub fn split_samples(set: &SampleSet, fractions: [f64; 4]) -> Result<Splits> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions must be >= 0 and sum to 1, got {fractions:?}")));
    }
    let n = set.len();
    let size = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let a = size(fractions[0]).min(n);
    let b = (a + size(fractions[1])).min(n);
    let c = (b + size(fractions[2])).min(n);
    let c = if fractions[3] == 0.0 { n.max(c) } else { c };
    Ok(Splits {
        train: set.slice(0..a),
        validation: set.slice(a..b),
        selection: set.slice(b..c),
        test: set.slice(c..n),
    })
}

pub fn split_dataset(d: &Dataset, fractions: [f64; 4]) -> Result<Splits> {
    split_samples(&d.coarse_samples()?, fractions)
}

pub const MAGIC: &[u8; 6] = b"ADANN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
}

/// Named binary64 tensors plus JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, Value>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let expect: usize = t.shape.iter().product();
            if expect != t.data.len() {
                return Err(Error::Format(format!(
                    "tensor '{}' has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: "f64".into(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len(),
            });
            offset += t.data.len();
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(18 + header.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 18 || &bytes[..6] != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
        let body = &bytes[18..];
        if body.len() < hlen {
            return Err(fmt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut total = 0;
        for e in header.tensors {
            if e.dtype != "f64" {
                return Err(Error::Format(format!("unsupported dtype '{}'", e.dtype)));
            }
            if e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Format(format!("tensor '{}' shape/length mismatch", e.name)));
            }
            let (lo, hi) = (8 * e.offset, 8 * (e.offset + e.len));
            if hi > payload.len() {
                return Err(fmt("truncated payload"));
            }
            let data = payload[lo..hi]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            total = total.max(hi);
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        if total != payload.len() {
            return Err(fmt("trailing bytes after payload"));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Trained models of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub base: BaseWeights,
    pub difference: Option<MlpWeights>,
    pub error_scale: f64,
    pub metadata: BTreeMap<String, Value>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container {
            metadata: self.metadata.clone(),
            tensors: vec![],
        };
        c.metadata.insert("kind".into(), Value::from("checkpoint"));
        c.metadata.insert("blocks".into(), Value::from(self.base.num_blocks()));
        c.metadata.insert("error_scale".into(), Value::from(self.error_scale));
        let d = self.base.dim();
        for (m, block) in self.base.blocks().iter().enumerate() {
            for (i, w) in block.iter().enumerate() {
                c.push(format!("base.block{m}.w{}", i + 1), vec![d, d], row_major(w));
            }
        }
        if let Some(mlp) = &self.difference {
            c.metadata.insert("layers".into(), Value::from(mlp.layers.len()));
            for (l, layer) in mlp.layers.iter().enumerate() {
                let (r, k) = layer.weight.shape();
                c.push(format!("mlp.layer{l}.weight"), vec![r, k], row_major(&layer.weight));
                c.push(format!("mlp.layer{l}.bias"), vec![r], layer.bias.as_slice().to_vec());
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.metadata.get("kind") != Some(&Value::from("checkpoint")) {
            return Err(Error::Format("container does not hold a checkpoint".into()));
        }
        let count = |key: &str| -> Result<Option<usize>> {
            match c.metadata.get(key) {
                None => Ok(None),
                Some(v) => v
                    .as_u64()
                    .map(|v| Some(v as usize))
                    .ok_or_else(|| Error::Format(format!("bad '{key}' entry"))),
            }
        };
        let matrix = |name: &str| -> Result<DMatrix<f64>> {
            let t = c.tensor(name)?;
            match t.shape[..] {
                [r, k] => Ok(DMatrix::from_row_slice(r, k, &t.data)),
                _ => Err(Error::Format(format!("tensor '{name}' is not a matrix"))),
            }
        };
        let blocks = count("blocks")?.ok_or_else(|| Error::Format("missing block count".into()))?;
        let base = BaseWeights::new(
            (0..blocks)
                .map(|m| {
                    let w = |i| matrix(&format!("base.block{m}.w{i}"));
                    Ok([w(1)?, w(2)?, w(3)?, w(4)?, w(5)?])
                })
                .collect::<Result<_>>()?,
        )?;
        let difference = match count("layers")? {
            None => None,
            Some(n) => Some(MlpWeights::new(
                (0..n)
                    .map(|l| {
                        Ok(Layer {
                            weight: matrix(&format!("mlp.layer{l}.weight"))?,
                            bias: DVector::from_column_slice(&c.tensor(&format!("mlp.layer{l}.bias"))?.data),
                        })
                    })
                    .collect::<Result<_>>()?,
            )?),
        };
        let error_scale = c
            .metadata
            .get("error_scale")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Format("missing error scale".into()))?;
        let mut metadata = c.metadata.clone();
        for k in ["kind", "blocks", "layers", "error_scale"] {
            metadata.remove(k);
        }
        Ok(Self {
            base,
            difference,
            error_scale,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_model::{forward, from_lirk_params};
    use crate::difference_model::{glorot_uniform_init, MlpSpec};
    use crate::lirk::{rollout, LirkParams, OdeSystem};
    use crate::pde_problems::{Nonlinearity, Preset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_rd(n: usize, seed: u64) -> Dataset {
        let p = Preset::Rd1d;
        generate_dataset(&p.problem(), &p.initial_law(), p.reference_solver(), n, seed).unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let a = small_rd(16, 7);
        let b = small_rd(16, 7);
        assert_eq!(a, b);
        assert_eq!(a.inputs.shape(), (287, 16));
        assert_eq!(a.targets.shape(), (35, 16));
        assert_ne!(a, small_rd(16, 8));
        assert!(generate_dataset(&Preset::Rd1d.problem(), &Preset::Rd1d.initial_law(), Preset::Rd1d.reference_solver(), 0, 1).is_err());
    }

    #[test]
    fn sample_streams_do_not_depend_on_batch() {
        let big = small_rd(70, 3);
        let small = small_rd(2, 3);
        assert_eq!(big.inputs.columns(0, 2), small.inputs);
        for j in 0..2 {
            let diff = (big.targets.column(j) - small.targets.column(j)).amax();
            assert!(diff <= 1e-13, "{diff}");
        }
        // sample 65 sits in the second chunk
        let p = Preset::Rd1d;
        let fine = p.problem().with_points(287).unwrap();
        let s = p.initial_law().sampler(&fine.grid).unwrap();
        let g = s.sample(&mut split(3, Domain::InitialCondition, 65));
        assert_eq!(big.inputs.column(65), g);
    }

    #[test]
    fn zero_law_gives_rollout_of_zero() {
        let p = Preset::Rd1d;
        let law = InitialLaw::SineDecay {
            modes: 32,
            amplitude: 0.0,
        };
        let d = generate_dataset(&p.problem(), &law, p.reference_solver(), 1, 0).unwrap();
        assert!(d.inputs.iter().all(|v| *v == 0.0));
        let fine = p.problem().with_points(287).unwrap();
        let op = fine.grid.laplacian().unwrap();
        let sys = OdeSystem {
            linear: &op,
            nonlinearity: Nonlinearity::ReactionDiffusion,
        };
        let full = rollout(LirkParams::CRANK_NICOLSON, &sys, 1.0, 300, &DMatrix::zeros(287, 1)).unwrap();
        let idx = d.restriction().unwrap();
        for (i, &j) in idx.iter().enumerate() {
            assert!((d.targets[i] - full[j]).abs() < 1e-14);
        }
        assert!(d.targets.amax() > 0.1);
    }

    #[test]
    fn splits_partition_the_samples() {
        let set = SampleSet::new(
            DMatrix::from_fn(1, 100, |_, j| j as f64),
            DMatrix::zeros(1, 100),
        )
        .unwrap();
        let s = split_samples(&set, [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.train, set);
        let s = split_samples(&set, [0.75, 0.0625, 0.0625, 0.125]).unwrap();
        let sizes = [s.train.len(), s.validation.len(), s.selection.len(), s.test.len()];
        assert_eq!(sizes, [75, 6, 6, 13]);
        assert_eq!(sizes.iter().sum::<usize>(), 100);
        let mut seen: Vec<f64> = [&s.train, &s.validation, &s.selection, &s.test]
            .iter()
            .flat_map(|p| p.inputs.iter().copied())
            .collect();
        seen.dedup();
        assert_eq!(seen.len(), 100);
        assert!(split_samples(&set, [0.5, 0.2, 0.2, 0.2]).is_err());
        assert!(split_samples(&set, [1.5, -0.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn container_round_trip_is_bitwise() {
        let d = small_rd(3, 1);
        let bytes = d.to_container().unwrap().to_bytes().unwrap();
        let back = Dataset::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_container().unwrap().to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..6], b"ADANN1");
    }

    #[test]
    fn container_rejects_corruption() {
        let mut c = Container::default();
        c.push("x", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = c.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'B';
        assert!(Container::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(Container::from_bytes(&bad).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Container::from_bytes(&bytes[..12]).is_err());
        let mut wrong = Container::default();
        wrong.push("x", vec![3], vec![1.0]);
        assert!(wrong.to_bytes().is_err());
        assert!(Dataset::from_container(&c).is_err());
        assert!(Checkpoint::from_container(&c).is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let p = Preset::Rd1d;
        let op = p.problem().grid.laplacian().unwrap();
        let base = from_lirk_params(LirkParams::new(0.3, 0.7).unwrap(), &op, 1.0, 5).unwrap();
        let spec = MlpSpec::new(p.difference_widths()).unwrap();
        let mlp = glorot_uniform_init(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        let mut metadata = BTreeMap::new();
        metadata.insert("run".to_string(), Value::from(4));
        let ck = Checkpoint {
            base,
            difference: Some(mlp),
            error_scale: 0.0123,
            metadata,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.adann");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let x = DMatrix::from_fn(35, 3, |i, j| ((i * 7 + j) as f64).sin());
        let f = Nonlinearity::ReactionDiffusion;
        assert_eq!(forward(&back.base, f, &x).unwrap(), forward(&ck.base, f, &x).unwrap());
        let c = Container::load(&path).unwrap();
        assert_eq!(c.tensor("base.block0.w1").unwrap().shape, vec![35, 35]);
        assert_eq!(c.tensor("mlp.layer1.weight").unwrap().shape, vec![150, 50]);
        assert_eq!(c.to_bytes().unwrap(), std::fs::read(&path).unwrap());

        let base_only = Checkpoint {
            difference: None,
            ..ck
        };
        assert_eq!(Checkpoint::from_container(&base_only.to_container()).unwrap(), base_only);
    }

    #[test]
    fn dataset_file_round_trip() {
        let d = small_rd(2, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.adann");
        d.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), d);
        let set = d.coarse_samples().unwrap();
        assert_eq!(set.inputs.shape(), (35, 2));
        assert_eq!(set.inputs[(0, 1)], d.inputs[(7, 1)]);
    }
}
