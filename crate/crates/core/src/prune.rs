//! Pruning framework: Lasso on individual LSTM weights, group Lasso on
//! per-neuron weight groups, magnitude thresholding during training and
//! structure derivation from the resulting zero pattern.
//!
//! For neuron `k` of layer `l` with hidden size `H` the five groups are the
//! four gate rows `g*H + k` across `wx` and `wh` (size `I + H` each) and the
//! outgoing set: column `k` of `wh` plus column `k` of the next layer's
//! input matrix (size `4H + next`). The union grouping merges all five into
//! one group per neuron.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GroupIndex, Var};
use crate::error::{Error, Result};
use crate::lstm::{constant_gate_value, GateKind, GateStatus, NeuronStatus, StructureMasks};
use crate::model::{names, Model, ModelSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Four gate groups plus one outgoing group per neuron.
    FiveGroup,
    /// One group per neuron covering all its ingoing and outgoing weights.
    IssUnion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    #[serde(default = "default_lasso")]
    pub lambda_lasso: f64,
    #[serde(default)]
    pub lambda_group: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub grouping: Grouping,
}

fn default_lasso() -> f64 {
    1e-5
}

fn default_threshold() -> f64 {
    1e-4
}

impl PruneConfig {
    pub fn new(grouping: Grouping) -> Self {
        PruneConfig {
            lambda_lasso: default_lasso(),
            lambda_group: 0.0,
            threshold: default_threshold(),
            grouping,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lasso >= 0.0) || !(self.lambda_group >= 0.0) {
            return Err(Error::Config("regularization strengths must be non-negative".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!(
                "pruning threshold must be positive, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// What a group covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupRole {
    Gate(GateKind),
    Outgoing,
    Union,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLabel {
    pub layer: usize,
    pub neuron: usize,
    pub role: GroupRole,
}

/// Group membership over the weight tensors named in `parts`.
#[derive(Clone, Debug)]
pub struct WeightGroupIndex {
    pub parts: Vec<String>,
    pub index: Arc<GroupIndex>,
    pub labels: Vec<GroupLabel>,
}

impl WeightGroupIndex {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn members(&self, g: usize) -> &[(usize, usize)] {
        &self.index.groups[g]
    }

    /// L2 norm of each group for the given tensors.
    pub fn norms(&self, model: &Model) -> Result<Vec<f64>> {
        let tensors: Vec<&Tensor> = self.parts.iter().map(|n| model.get(n)).collect::<Result<_>>()?;
        Ok(self
            .index
            .groups
            .iter()
            .map(|g| g.iter().map(|&(p, i)| tensors[p].data()[i].powi(2)).sum::<f64>().sqrt())
            .collect())
    }
}

/// Tensors the groups range over: every LSTM `wx`/`wh` and the output
/// projection.
pub fn group_parts(spec: &ModelSpec) -> Vec<String> {
    let mut v: Vec<String> = (0..spec.num_layers())
        .flat_map(|l| [names::wx(l), names::wh(l)])
        .collect();
    v.push(names::FC_W.to_string());
    v
}

fn gate_row(l: usize, input: usize, hidden: usize, row: usize) -> Vec<(usize, usize)> {
    let (px, ph) = (2 * l, 2 * l + 1);
    (0..input)
        .map(|j| (px, row * input + j))
        .chain((0..hidden).map(|j| (ph, row * hidden + j)))
        .collect()
}

fn outgoing(spec: &ModelSpec, l: usize, k: usize) -> Vec<(usize, usize)> {
    let h = spec.hidden[l];
    let next_part = if l + 1 < spec.num_layers() { 2 * (l + 1) } else { 2 * spec.num_layers() };
    let next_rows = if l + 1 < spec.num_layers() { 4 * spec.hidden[l + 1] } else { spec.output };
    (0..4 * h)
        .map(|r| (2 * l + 1, r * h + k))
        .chain((0..next_rows).map(|r| (next_part, r * h + k)))
        .collect()
}

pub fn build_groups(spec: &ModelSpec, grouping: Grouping) -> Result<WeightGroupIndex> {
    spec.validate()?;
    let mut groups = Vec::new();
    let mut labels = Vec::new();
    for l in 0..spec.num_layers() {
        let (h, input) = (spec.hidden[l], spec.layer_input(l));
        for k in 0..h {
            match grouping {
                Grouping::FiveGroup => {
                    for g in GateKind::ALL {
                        groups.push(gate_row(l, input, h, g.index() * h + k));
                        labels.push(GroupLabel { layer: l, neuron: k, role: GroupRole::Gate(g) });
                    }
                    groups.push(outgoing(spec, l, k));
                    labels.push(GroupLabel { layer: l, neuron: k, role: GroupRole::Outgoing });
                }
                Grouping::IssUnion => {
                    let mut seen = BTreeSet::new();
                    let mut all = Vec::new();
                    let sets = GateKind::ALL
                        .iter()
                        .map(|g| gate_row(l, input, h, g.index() * h + k))
                        .chain(std::iter::once(outgoing(spec, l, k)));
                    for set in sets {
                        for m in set {
                            if seen.insert(m) {
                                all.push(m);
                            }
                        }
                    }
                    groups.push(all);
                    labels.push(GroupLabel { layer: l, neuron: k, role: GroupRole::Union });
                }
            }
        }
    }
    Ok(WeightGroupIndex {
        parts: group_parts(spec),
        index: Arc::new(GroupIndex { groups }),
        labels,
    })
}

/// `lambda * sum_g ||w_g||_2`.
pub fn group_lasso_penalty(model: &Model, groups: &WeightGroupIndex, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config("lambda_group must be non-negative".into()));
    }
    Ok(lambda * groups.norms(model)?.iter().sum::<f64>())
}

/// `lambda * sum |w|` over the given tensors.
pub fn lasso_penalty<'a>(weights: impl IntoIterator<Item = &'a Tensor>, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Config("lambda_lasso must be non-negative".into()));
    }
    Ok(lambda * weights.into_iter().flat_map(|t| t.data()).map(|x| x.abs()).sum::<f64>())
}

/// Adds the Lasso (LSTM weights) and group-Lasso terms to the graph.
/// Returns `None` when both strengths are zero.
pub fn penalty_term(
    graph: &mut Graph,
    leaves: &BTreeMap<String, Var>,
    model: &Model,
    groups: &WeightGroupIndex,
    cfg: &PruneConfig,
) -> Result<Option<Var>> {
    let leaf = |n: &str| {
        leaves
            .get(n)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no leaf for {n}")))
    };
    let mut total: Option<Var> = None;
    let mut push = |graph: &mut Graph, v: Var| -> Result<()> {
        total = Some(match total {
            Some(t) => graph.add(t, v)?,
            None => v,
        });
        Ok(())
    };
    if cfg.lambda_lasso > 0.0 {
        for n in model.lstm_weight_names() {
            let l1 = graph.l1(leaf(&n)?);
            let term = graph.scale(l1, cfg.lambda_lasso);
            push(graph, term)?;
        }
    }
    if cfg.lambda_group > 0.0 {
        let parts: Vec<Var> = groups.parts.iter().map(|n| leaf(n)).collect::<Result<_>>()?;
        let norms = graph.group_l2(&parts, groups.index.clone())?;
        let s = graph.sum(norms);
        let term = graph.scale(s, cfg.lambda_group);
        push(graph, term)?;
    }
    Ok(total)
}

/// Sets every entry with `|w| < threshold` to exactly zero. Returns the
/// number of zeros in the result.
pub fn threshold_prune_step(w: &mut Tensor, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("pruning threshold must be positive, got {threshold}")));
    }
    let mut zeros = 0;
    for x in w.data_mut() {
        if x.abs() < threshold {
            *x = 0.0;
        }
        if *x == 0.0 {
            zeros += 1;
        }
    }
    Ok(zeros)
}

/// Thresholds every tensor the groups range over (LSTM matrices and the
/// output projection, whose columns belong to the last layer's outgoing
/// groups).
pub fn threshold_model(model: &mut Model, threshold: f64) -> Result<()> {
    for n in group_parts(&model.spec) {
        threshold_prune_step(model.get_mut(&n)?, threshold)?;
    }
    Ok(())
}

/// Structure implied by exact zeros. Five-group: a gate is constant iff
/// its ingoing row is zero, a neuron is removed iff its outgoing set is
/// zero. Union: a neuron is removed iff its whole union group is zero and
/// gates are never reported constant.
pub fn derive_structure_pruned(model: &Model, grouping: Grouping) -> Result<Vec<StructureMasks>> {
    let idx = build_groups(&model.spec, grouping)?;
    let norms = idx.norms(model)?;
    let mut masks: Vec<StructureMasks> = model.spec.hidden.iter().map(|&h| StructureMasks::dense(h)).collect();
    for (label, &norm) in idx.labels.iter().zip(&norms) {
        if norm != 0.0 {
            continue;
        }
        let mk = &mut masks[label.layer];
        match label.role {
            GroupRole::Gate(g) => {
                let h = model.spec.hidden[label.layer];
                let b = model.get(&names::bias(label.layer))?.data()[g.index() * h + label.neuron];
                mk.gates[g.index()][label.neuron] = GateStatus::Constant(constant_gate_value(b, g));
            }
            GroupRole::Outgoing | GroupRole::Union => mk.neurons[label.neuron] = NeuronStatus::Removed,
        }
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InitConfig, InputSpec, TaskKind};
    use crate::SeededRng;
    use rand::SeedableRng;

    fn spec(input: usize, hidden: Vec<usize>, output: usize) -> ModelSpec {
        ModelSpec {
            input: InputSpec::Dense { dim: input },
            hidden,
            output,
            task: TaskKind::Regression,
            oov_id: None,
        }
    }

    #[test]
    fn group_sizes() {
        let s = spec(3, vec![2], 5);
        let g = build_groups(&s, Grouping::FiveGroup).unwrap();
        assert_eq!(g.len(), 2 * 5);
        for (i, lab) in g.labels.iter().enumerate() {
            let n = g.members(i).len();
            match lab.role {
                GroupRole::Gate(_) => assert_eq!(n, 3 + 2),
                GroupRole::Outgoing => assert_eq!(n, 4 * 2 + 5),
                GroupRole::Union => unreachable!(),
            }
        }
    }

    #[test]
    fn gate_groups_partition_lstm_weights() {
        let s = spec(3, vec![4, 2], 5);
        let g = build_groups(&s, Grouping::FiveGroup).unwrap();
        let mut seen = BTreeSet::new();
        for (i, lab) in g.labels.iter().enumerate() {
            if let GroupRole::Gate(_) = lab.role {
                for &m in g.members(i) {
                    assert!(seen.insert(m), "{m:?} in two gate groups");
                }
            }
        }
        let total = 16 * 3 + 16 * 4 + 8 * 4 + 8 * 2;
        assert_eq!(seen.len(), total);
    }

    #[test]
    fn union_group_is_deduplicated_union() {
        let s = spec(3, vec![2], 1);
        let five = build_groups(&s, Grouping::FiveGroup).unwrap();
        let iss = build_groups(&s, Grouping::IssUnion).unwrap();
        for k in 0..2 {
            let expected: BTreeSet<_> = (0..5).flat_map(|j| five.members(k * 5 + j).iter().copied()).collect();
            let got: Vec<_> = iss.members(k).to_vec();
            assert_eq!(got.len(), expected.len());
            assert_eq!(got.into_iter().collect::<BTreeSet<_>>(), expected);
        }
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(lasso_penalty([&Tensor::vector(vec![1.0, -2.0, 3.0])], 1.0).unwrap(), 6.0);
        assert_eq!(lasso_penalty([&Tensor::zeros(&[4])], 1.0).unwrap(), 0.0);
        let m = Model::zeros(spec(3, vec![2], 5)).unwrap();
        let g = build_groups(&m.spec, Grouping::FiveGroup).unwrap();
        assert_eq!(group_lasso_penalty(&m, &g, 1.0).unwrap(), 0.0);
        let mut m = m;
        m.get_mut("lstm0.wx").unwrap().data_mut()[..2].copy_from_slice(&[3.0, 4.0]);
        // Row 0 of wx belongs to one gate group only.
        assert_eq!(group_lasso_penalty(&m, &g, 2.0).unwrap(), 10.0);
    }

    #[test]
    fn strict_threshold() {
        let mut w = Tensor::vector(vec![5e-5, -1e-4, 1e-4, -3e-5, 0.2]);
        assert_eq!(threshold_prune_step(&mut w, 1e-4).unwrap(), 2);
        assert_eq!(w.data(), &[0.0, -1e-4, 1e-4, 0.0, 0.2]);
        assert!(threshold_prune_step(&mut w, 0.0).is_err());
    }

    #[test]
    fn fresh_model_is_dense() {
        let m = Model::init(spec(3, vec![4], 2), &InitConfig::default(), &mut SeededRng::seed_from_u64(3)).unwrap();
        for grouping in [Grouping::FiveGroup, Grouping::IssUnion] {
            let masks = derive_structure_pruned(&m, grouping).unwrap();
            assert_eq!(masks, vec![StructureMasks::dense(4)]);
        }
    }

    #[test]
    fn zeroed_forget_row_is_constant() {
        let mut m = Model::init(spec(3, vec![4], 2), &InitConfig::default(), &mut SeededRng::seed_from_u64(3)).unwrap();
        let row = 4 + 2;
        for j in 0..3 {
            m.get_mut("lstm0.wx").unwrap().set2(row, j, 0.0);
        }
        for j in 0..4 {
            m.get_mut("lstm0.wh").unwrap().set2(row, j, 0.0);
        }
        m.get_mut("lstm0.b").unwrap().data_mut()[row] = 1.0;
        let masks = derive_structure_pruned(&m, Grouping::FiveGroup).unwrap();
        assert_eq!(masks[0].gate(GateKind::Forget, 2), GateStatus::Constant(constant_gate_value(1.0, GateKind::Forget)));
        assert_eq!(masks[0].gates.iter().flatten().filter(|s| !s.is_active()).count(), 1);
        let iss = derive_structure_pruned(&m, Grouping::IssUnion).unwrap();
        assert_eq!(iss, vec![StructureMasks::dense(4)]);
    }
}
