//! Named parameter arrays, grouped into the model's fixed partitions.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};

/// How a parameter array is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Linear weight: uniform on ±1/sqrt(fan_in).
    FanIn(usize),
    /// Uniform on ±bound.
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }

    /// Weight matrix `fan_in × fan_out` plus a zero `1 × fan_out` bias.
    pub fn linear(prefix: &str, fan_in: usize, fan_out: usize) -> [ParamSpec; 2] {
        [
            ParamSpec::new(format!("{prefix}.w"), fan_in, fan_out, Init::FanIn(fan_in)),
            ParamSpec::new(format!("{prefix}.b"), 1, fan_out, Init::Zeros),
        ]
    }

    pub fn layer_norm(prefix: &str, width: usize) -> [ParamSpec; 2] {
        [
            ParamSpec::new(format!("{prefix}.g"), 1, width, Init::Ones),
            ParamSpec::new(format!("{prefix}.b"), 1, width, Init::Zeros),
        ]
    }
}

/// An ordered set of named dense arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for spec in specs {
            let shape = (spec.rows, spec.cols);
            let m = match spec.init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Matrix::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
                }
                Init::Uniform(bound) => {
                    Matrix::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound))
                }
                Init::Zeros => Matrix::zeros(shape),
                Init::Ones => Matrix::ones(shape),
            };
            set.insert(spec.name.clone(), m);
        }
        set
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = ParamSet::new();
        for (name, m) in self.iter() {
            out.insert(name.to_string(), Matrix::zeros(m.raw_dim()));
        }
        out
    }

    pub fn insert(&mut self, name: String, m: Matrix) {
        if let Some(&i) = self.index.get(&name) {
            self.arrays[i] = m;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.arrays.push(m);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.arrays[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    /// Checks that every spec is present with the declared shape and nothing else is.
    pub fn check_shapes(&self, specs: &[ParamSpec], what: &str) -> Result<()> {
        if specs.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected {} arrays, found {}",
                specs.len(),
                self.len()
            )));
        }
        for spec in specs {
            let m = self.get(&spec.name).ok_or_else(|| {
                Error::ShapeMismatch(format!("{what}: missing array {}", spec.name))
            })?;
            if m.dim() != (spec.rows, spec.cols) {
                return Err(Error::ShapeMismatch(format!(
                    "{what}: {} is {:?}, expected {:?}",
                    spec.name,
                    m.dim(),
                    (spec.rows, spec.cols)
                )));
            }
        }
        Ok(())
    }

    /// Registers every array as a leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundParams<'a> {
        let vars = self.arrays.iter().map(|a| tape.leaf(a.clone())).collect();
        BoundParams { set: self, vars }
    }

    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for (name, m) in self.iter_mut() {
            if let Some(o) = other.get(name) {
                m.scaled_add(scale, o);
            }
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.arrays.iter().map(|a| a.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// A [`ParamSet`] whose arrays live on a tape.
pub struct BoundParams<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    /// Panics if `name` is missing; shapes are validated before any forward pass.
    pub fn var(&self, name: &str) -> Var {
        match self.set.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name} not bound"),
        }
    }

    /// Gradients for every array in declared order, zero where none flowed.
    pub fn grads(&self, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for ((name, m), &v) in self.set.iter().zip(&self.vars) {
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.raw_dim()));
            out.insert(name.to_string(), g);
        }
        out
    }
}

/// The six fixed parameter partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    StructEncoder,
    SeqEncoder,
    ProjStruct,
    ProjSeq,
    Decoder,
    EmbedTable,
}

impl Partition {
    pub const ALL: [Partition; 6] = [
        Partition::StructEncoder,
        Partition::SeqEncoder,
        Partition::ProjStruct,
        Partition::ProjSeq,
        Partition::Decoder,
        Partition::EmbedTable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Partition::StructEncoder => "struct_encoder",
            Partition::SeqEncoder => "seq_encoder",
            Partition::ProjStruct => "proj_struct",
            Partition::ProjSeq => "proj_seq",
            Partition::Decoder => "decoder",
            Partition::EmbedTable => "embed_table",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Partition::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every learnable array of the model, by partition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub struct_encoder: ParamSet,
    pub seq_encoder: ParamSet,
    pub proj_struct: ParamSet,
    pub proj_seq: ParamSet,
    pub decoder: ParamSet,
    pub embed_table: ParamSet,
}

impl ModelParams {
    pub fn partition(&self, p: Partition) -> &ParamSet {
        match p {
            Partition::StructEncoder => &self.struct_encoder,
            Partition::SeqEncoder => &self.seq_encoder,
            Partition::ProjStruct => &self.proj_struct,
            Partition::ProjSeq => &self.proj_seq,
            Partition::Decoder => &self.decoder,
            Partition::EmbedTable => &self.embed_table,
        }
    }

    pub fn partition_mut(&mut self, p: Partition) -> &mut ParamSet {
        match p {
            Partition::StructEncoder => &mut self.struct_encoder,
            Partition::SeqEncoder => &mut self.seq_encoder,
            Partition::ProjStruct => &mut self.proj_struct,
            Partition::ProjSeq => &mut self.proj_seq,
            Partition::Decoder => &mut self.decoder,
            Partition::EmbedTable => &mut self.embed_table,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = ModelParams::default();
        for p in Partition::ALL {
            *out.partition_mut(p) = self.partition(p).zeros_like();
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        Partition::ALL.iter().all(|&p| self.partition(p).all_finite())
    }

    pub fn num_scalars(&self) -> usize {
        Partition::ALL
            .iter()
            .map(|&p| self.partition(p).num_scalars())
            .sum()
    }
}
