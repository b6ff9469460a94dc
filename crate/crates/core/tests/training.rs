use gatesparse::config::RunConfig;
use gatesparse::lstm::StructureMasks;
use gatesparse::analyze::count_structure;
use gatesparse::model::names;
use gatesparse::train::{finalize, prepare_data, train};

fn config(framework: &str, epochs: usize, optimizer: &str) -> RunConfig {
    RunConfig::parse(&format!(
        r#"
seed = 12
[model]
input = "dense"
hidden = [8]
task = "regression"
[data]
source = "synthetic_regression"
seed = 4
train_examples = 400
valid_examples = 100
steps = 4
relevant = 3
irrelevant = 5
noise_std = 0.1
[framework]
{framework}
[optimizer]
{optimizer}
[train]
epochs = {epochs}
batch_size = 20
noise_std = 0.1
[output]
checkpoint = "unused.ckpt"
"#
    ))
    .unwrap()
}

const ADAM: &str = "kind = \"adam\"\nschedule = { kind = \"constant\", initial = 0.01 }";
// Subgradient steps chatter around zero at amplitude ~ lr * lambda; the
// late decay brings that below the pruning threshold.
const SGD: &str = "kind = \"sgd\"\nschedule = { kind = \"milestones\", initial = 0.002, epochs = [30, 45], decay = 0.1 }";

#[test]
fn frozen_group_weights_train_exactly_like_weight_only() {
    let w = config("kind = \"bayes\"\nvariant = \"W\"", 5, ADAM);
    let frozen = config(
        "kind = \"bayes\"\nvariant = \"W+G+N\"\nfeature_groups = true\nfreeze_group_weights = true",
        5,
        ADAM,
    );
    let data = prepare_data(&w).unwrap();
    let a = train(&w, &data, &mut |_| {}).unwrap().checkpoint;
    let b = train(&frozen, &data, &mut |_| {}).unwrap().checkpoint;
    for (name, t) in &a.model.params {
        assert_eq!(b.model.get(name).unwrap(), t, "{name}");
    }
    for z in [names::z_gates(0), names::z_h(0), names::FEATURE_Z.to_string()] {
        assert!(b.model.get(&z).unwrap().data().iter().all(|&x| x == 1.0), "{z} stays at one");
    }
    let losses = |c: &gatesparse::checkpoint::Checkpoint| -> Vec<f64> {
        c.meta.training.metrics.iter().map(|m| m.train_loss).collect()
    };
    assert_eq!(losses(&a), losses(&b));
}

fn nonconstant_gates(masks: &[StructureMasks]) -> usize {
    masks.iter().map(|m| count_structure(m).1).sum()
}

#[test]
fn growing_group_lambda_never_adds_gates() {
    let mut counts = Vec::new();
    for lambda in [0.0, 0.3, 1.0, 3.0] {
        let cfg = config(
            &format!("kind = \"prune\"\ngrouping = \"five_group\"\nlambda_group = {lambda}"),
            60,
            SGD,
        );
        let data = prepare_data(&cfg).unwrap();
        let out = train(&cfg, &data, &mut |_| {}).unwrap();
        assert!(out.aborted.is_none());
        counts.push(nonconstant_gates(finalize(&out.checkpoint).unwrap().meta.masks.as_ref().unwrap()));
    }
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    assert!(counts.last() < counts.first(), "{counts:?}");
}
