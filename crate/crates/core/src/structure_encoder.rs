//! Message passing over the residue graph.
//!
//! Node states start at zero; all signal enters through the radial-basis edge
//! features. Each layer builds a message per (i, neighbor) slot from
//! `[h_i, h_j, e_ij]` through a two-layer feedforward, averages the valid
//! slots of each residue, adds the result to `h_i` and layer-normalizes.
//!
//! The relational variant keeps one message network per distance bucket
//! (`[0,6)`, `[6,12)`, `[12,∞)` Å) and routes each edge through its bucket's
//! network.

use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet, ParamSpec};
use crate::protein_io::ResidueGraph;

pub const RELATIONAL_BUCKETS: [f64; 2] = [6.0, 12.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureVariant {
    MpnnStyle,
    RelationalStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureEncoderConfig {
    pub d_struct: usize,
    pub num_layers: usize,
    pub variant: StructureVariant,
    /// Edge feature width; must equal the graph's radial-basis count.
    pub d_edge: usize,
}

impl Default for StructureEncoderConfig {
    fn default() -> Self {
        Self {
            d_struct: 32,
            num_layers: 3,
            variant: StructureVariant::MpnnStyle,
            d_edge: 16,
        }
    }
}

impl StructureEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.d_struct == 0 || self.d_edge == 0 {
            return Err(Error::Config(
                "structure encoder widths and layer count must be positive".into(),
            ));
        }
        Ok(())
    }

    fn edge_types(&self) -> usize {
        match self.variant {
            StructureVariant::MpnnStyle => 1,
            StructureVariant::RelationalStyle => RELATIONAL_BUCKETS.len() + 1,
        }
    }

    fn message_prefix(&self, layer: usize, edge_type: usize) -> String {
        match self.variant {
            StructureVariant::MpnnStyle => format!("layer{layer}"),
            StructureVariant::RelationalStyle => format!("layer{layer}.type{edge_type}"),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.d_struct;
        let mut specs = Vec::new();
        for l in 0..self.num_layers {
            for t in 0..self.edge_types() {
                let p = self.message_prefix(l, t);
                specs.extend(ParamSpec::linear(&format!("{p}.msg1"), 2 * d + self.d_edge, d));
                specs.extend(ParamSpec::linear(&format!("{p}.msg2"), d, d));
            }
            specs.extend(ParamSpec::layer_norm(&format!("layer{l}.norm"), d));
        }
        specs
    }
}

/// Per-residue feature matrix (`L × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidueFeatures {
    pub values: Matrix,
}

impl ResidueFeatures {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

pub fn init_structure_params(cfg: &StructureEncoderConfig, seed: u64) -> ParamSet {
    ParamSet::init(&cfg.param_specs(), seed)
}

pub fn distance_bucket(distance: f64) -> usize {
    RELATIONAL_BUCKETS
        .iter()
        .position(|&edge| distance < edge)
        .unwrap_or(RELATIONAL_BUCKETS.len())
}

/// Records the encoder on `tape` and returns the `L × d_struct` output node.
pub fn encode_structure_on(
    tape: &mut Tape,
    graph: &ResidueGraph,
    cfg: &StructureEncoderConfig,
    params: &BoundParams,
) -> Var {
    let l = graph.num_residues;
    let k = graph.k;
    let d = cfg.d_struct;

    let self_rows: Vec<usize> = (0..l * k).map(|slot| slot / k).collect();
    let edges = tape.leaf(graph.edge_features.clone());

    let mut mean = vec![0.0; l * k];
    for i in 0..l {
        let slots = graph.valid_slots(i);
        let count = slots.iter().filter(|&&v| v).count() as f64;
        for (s, &ok) in slots.iter().enumerate() {
            if ok {
                mean[i * k + s] = 1.0 / count;
            }
        }
    }

    let bucket_masks: Vec<Matrix> = if cfg.variant == StructureVariant::RelationalStyle {
        (0..cfg.edge_types())
            .map(|t| {
                let mut m = Matrix::zeros((l * k, d));
                for (slot, &dist) in graph.distances.iter().enumerate() {
                    if distance_bucket(dist) == t {
                        m.row_mut(slot).fill(1.0);
                    }
                }
                m
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut h = tape.leaf(Matrix::zeros((l, d)));
    for layer in 0..cfg.num_layers {
        let hi = tape.gather_rows(h, &self_rows);
        let hj = tape.gather_rows(h, &graph.neighbor_index);
        let input = tape.concat_cols(&[hi, hj, edges]);
        let mut message = None;
        for t in 0..cfg.edge_types() {
            let p = cfg.message_prefix(layer, t);
            let a = tape.linear(
                input,
                params.var(&format!("{p}.msg1.w")),
                params.var(&format!("{p}.msg1.b")),
            );
            let a = tape.gelu(a);
            let m = tape.linear(
                a,
                params.var(&format!("{p}.msg2.w")),
                params.var(&format!("{p}.msg2.b")),
            );
            let m = match bucket_masks.get(t) {
                Some(mask) => tape.mul_const(m, mask.clone()),
                None => m,
            };
            message = Some(match message {
                Some(acc) => tape.add(acc, m),
                None => m,
            });
        }
        let agg = tape.group_sum(message.expect("at least one edge type"), k, &mean);
        let sum = tape.add(h, agg);
        h = tape.layer_norm(
            sum,
            params.var(&format!("layer{layer}.norm.g")),
            params.var(&format!("layer{layer}.norm.b")),
        );
    }
    h
}

pub fn encode_structure(
    graph: &ResidueGraph,
    cfg: &StructureEncoderConfig,
    params: &ParamSet,
) -> Result<ResidueFeatures> {
    cfg.validate()?;
    params.check_shapes(&cfg.param_specs(), "structure encoder")?;
    if graph.rbf_count() != cfg.d_edge {
        return Err(Error::ShapeMismatch(format!(
            "graph has {} edge features, encoder expects {}",
            graph.rbf_count(),
            cfg.d_edge
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = encode_structure_on(&mut tape, graph, cfg, &bound);
    Ok(ResidueFeatures {
        values: tape.value(out).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::random_structure;
    use crate::gradcheck::max_relative_error;
    use crate::protein_io::{build_residue_graph, GraphConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: StructureVariant) -> StructureEncoderConfig {
        StructureEncoderConfig {
            d_struct: 8,
            num_layers: 2,
            variant,
            d_edge: 6,
        }
    }

    fn graph(len: usize, k: usize, seed: u64) -> ResidueGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_structure("g", len, &mut rng);
        build_residue_graph(&s, GraphConfig { k, rbf_count: 6 })
    }

    #[test]
    fn single_residue_output_is_finite() {
        for v in [StructureVariant::MpnnStyle, StructureVariant::RelationalStyle] {
            let c = cfg(v);
            let p = init_structure_params(&c, 1);
            let out = encode_structure(&graph(1, 4, 0), &c, &p).unwrap();
            assert_eq!(out.values.dim(), (1, 8));
            assert!(out.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn encoding_is_pure() {
        let c = cfg(StructureVariant::MpnnStyle);
        let p = init_structure_params(&c, 5);
        let g = graph(9, 4, 2);
        assert_eq!(
            encode_structure(&g, &c, &p).unwrap(),
            encode_structure(&g, &c, &p).unwrap()
        );
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let c = cfg(StructureVariant::MpnnStyle);
        let p = init_structure_params(&cfg(StructureVariant::RelationalStyle), 5);
        assert!(matches!(
            encode_structure(&graph(3, 2, 0), &c, &p),
            Err(Error::ShapeMismatch(_))
        ));
        let p = init_structure_params(&c, 5);
        let wrong_edges = {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let s = random_structure("g", 3, &mut rng);
            build_residue_graph(&s, GraphConfig { k: 2, rbf_count: 7 })
        };
        assert!(encode_structure(&wrong_edges, &c, &p).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let c = cfg(StructureVariant::RelationalStyle);
        let p = init_structure_params(&c, 9);
        for spec in c.param_specs() {
            if let crate::params::Init::FanIn(fan_in) = spec.init {
                let bound = (6.0 / fan_in as f64).sqrt();
                assert!(p.get(&spec.name).unwrap().iter().all(|v| v.abs() <= bound));
            }
        }
        assert_ne!(p, init_structure_params(&c, 10));
        assert_eq!(p, init_structure_params(&c, 9));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for v in [StructureVariant::MpnnStyle, StructureVariant::RelationalStyle] {
            let c = cfg(v);
            let params = crate::gradcheck::jitter(&init_structure_params(&c, 3), 0.3, 4);
            let g = graph(6, 4, 7);
            let err = max_relative_error(&params, |tape, bound| {
                encode_structure_on(tape, &g, &c, bound)
            });
            assert!(err <= 1e-3, "{v:?}: relative error {err}");
        }
    }

    fn max_abs_diff(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
        a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn translation_leaves_output_unchanged() {
        let gc = GraphConfig { k: 4, rbf_count: 6 };
        for v in [StructureVariant::MpnnStyle, StructureVariant::RelationalStyle] {
            let c = cfg(v);
            let p = init_structure_params(&c, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let s = random_structure("t", 12, &mut rng);
            let mut moved = s.clone();
            for r in &mut moved.residues {
                for xyz in [&mut r.n_xyz, &mut r.ca_xyz, &mut r.c_xyz, &mut r.o_xyz] {
                    xyz[0] += 250.0;
                    xyz[1] -= 31.5;
                    xyz[2] += 7.25;
                }
            }
            let a = encode_structure(&build_residue_graph(&s, gc), &c, &p).unwrap().values;
            let b = encode_structure(&build_residue_graph(&moved, gc), &c, &p).unwrap().values;
            for i in 0..a.nrows() {
                assert!(max_abs_diff(a.row(i), b.row(i)) <= 1e-5, "{v:?} row {i}");
            }
        }
    }

    #[test]
    fn permuting_residues_permutes_rows() {
        let gc = GraphConfig { k: 4, rbf_count: 6 };
        for v in [StructureVariant::MpnnStyle, StructureVariant::RelationalStyle] {
            let c = cfg(v);
            let p = init_structure_params(&c, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let s = random_structure("t", 10, &mut rng);
            let order = [3, 7, 0, 9, 1, 5, 2, 8, 6, 4];
            let mut perm = s.clone();
            perm.residues = order.iter().map(|&i| s.residues[i].clone()).collect();
            let a = encode_structure(&build_residue_graph(&s, gc), &c, &p).unwrap().values;
            let b = encode_structure(&build_residue_graph(&perm, gc), &c, &p).unwrap().values;
            for (new, &old) in order.iter().enumerate() {
                assert!(max_abs_diff(b.row(new), a.row(old)) <= 1e-5, "{v:?} row {new}");
            }
        }
    }

    #[test]
    fn relational_buckets() {
        assert_eq!(distance_bucket(0.0), 0);
        assert_eq!(distance_bucket(5.99), 0);
        assert_eq!(distance_bucket(6.0), 1);
        assert_eq!(distance_bucket(12.0), 2);
        assert_eq!(distance_bucket(100.0), 2);
    }
}
