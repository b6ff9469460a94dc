//! Training loop, evaluation and finalization for all three frameworks.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::autodiff::{Graph, Var};
use crate::bayes::{derive_structure_bayes, make_variational, test_time_weights, BayesConfig};
use crate::checkpoint::{Checkpoint, CheckpointState, EpochMetrics, TrainingInfo};
use crate::config::{DataConfig, Framework, InputKind, OptimizerKind, RunConfig};
use crate::data::{
    load_classification, load_lm_dir, make_class_batches, make_lm_batches, synthetic_english, synthetic_regression,
    ClassDataset, LmBatch, RegressionData, TokenMode, Vocab, UNK,
};
use crate::error::{Error, Result};
use crate::lstm::StructureMasks;
use crate::metrics::{argmax, bits_per_char, perplexity};
use crate::model::{InputSpec, Model, ModelSpec, TaskKind};
use crate::net::{classification_loss, lm_loss, regression_loss, BatchGraph, Net, NetOptions, State};
use crate::optim::{clip_global_norm, Adam, Optimizer, ParamGrad, Sgd};
use crate::prune::{build_groups, derive_structure_pruned, penalty_term, threshold_model, Grouping, WeightGroupIndex};
use crate::SeededRng;

/// Training and validation data in model-ready form.
#[derive(Clone, Debug)]
pub enum Dataset {
    Lm {
        vocab: Vocab,
        train: Vec<usize>,
        valid: Vec<usize>,
    },
    Class {
        vocab: Vocab,
        train: ClassDataset,
        valid: ClassDataset,
        max_len: Option<usize>,
    },
    Regression {
        train: RegressionData,
        valid: RegressionData,
    },
}

impl Dataset {
    pub fn vocab(&self) -> Option<&Vocab> {
        match self {
            Dataset::Lm { vocab, .. } | Dataset::Class { vocab, .. } => Some(vocab),
            Dataset::Regression { .. } => None,
        }
    }

    /// Number of likelihood terms in one pass over the training data.
    fn train_units(&self, cfg: &RunConfig) -> Result<usize> {
        Ok(match self {
            Dataset::Lm { train, .. } => {
                crate::data::lm_token_count(&make_lm_batches(train, cfg.train.batch_size, cfg.train.bptt)?)
            }
            Dataset::Class { train, .. } => train.examples.len(),
            Dataset::Regression { train, .. } => train.inputs.len(),
        })
    }
}

fn vocab_size(v: Option<usize>) -> usize {
    v.unwrap_or(usize::MAX)
}

/// Loads or generates the data a config describes.
pub fn prepare_data(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.data, cfg.model.task) {
        (
            DataConfig::SyntheticText {
                seed,
                bytes,
                valid_bytes,
                token_mode,
                vocab_size: vs,
            },
            TaskKind::LanguageModel,
        ) => {
            let train = synthetic_english(*bytes, *seed);
            let valid = synthetic_english(*valid_bytes, seed.wrapping_add(0x9e37_79b9));
            lm_dataset(&train, &valid, *token_mode, vocab_size(*vs))
        }
        (
            DataConfig::Dir {
                path,
                token_mode,
                vocab_size: vs,
                ..
            },
            TaskKind::LanguageModel,
        ) => {
            let c = load_lm_dir(path)?;
            lm_dataset(&c.train, &c.valid, *token_mode, vocab_size(*vs))
        }
        (
            DataConfig::Dir {
                path,
                token_mode,
                vocab_size: vs,
                valid_fraction,
                max_len,
            },
            TaskKind::Classification,
        ) => {
            let all = load_classification(&path.join("train.tsv"))?;
            let valid_file = path.join("valid.tsv");
            let (train, valid) = if valid_file.exists() {
                let v = load_classification(&valid_file)?.relabel(&all.labels)?;
                (all, v)
            } else {
                let frac = valid_fraction.ok_or_else(|| {
                    Error::Config("classification without valid.tsv needs data.valid_fraction".into())
                })?;
                all.split(frac, cfg.seed)?
            };
            if valid.examples.is_empty() {
                return Err(Error::Data("validation split is empty".into()));
            }
            let vocab = Vocab::build(&train.corpus(), *token_mode, vocab_size(*vs))?;
            Ok(Dataset::Class {
                vocab,
                train,
                valid,
                max_len: *max_len,
            })
        }
        (
            DataConfig::SyntheticRegression {
                seed,
                train_examples,
                valid_examples,
                steps,
                relevant,
                irrelevant,
                noise_std,
            },
            TaskKind::Regression,
        ) => {
            let n = train_examples + valid_examples;
            let (all, _) = synthetic_regression(n, *steps, *relevant, *irrelevant, *noise_std, *seed)?;
            let split = |r: std::ops::Range<usize>| RegressionData {
                inputs: all.inputs[r.clone()].to_vec(),
                targets: all.targets[r].to_vec(),
                relevant: all.relevant,
            };
            Ok(Dataset::Regression {
                train: split(0..*train_examples),
                valid: split(*train_examples..n),
            })
        }
        _ => Err(Error::Config("data source does not fit the task".into())),
    }
}

fn lm_dataset(train: &str, valid: &str, mode: TokenMode, max: usize) -> Result<Dataset> {
    let vocab = Vocab::build(train, mode, max)?;
    Ok(Dataset::Lm {
        train: vocab.encode(train),
        valid: vocab.encode(valid),
        vocab,
    })
}

pub fn build_spec(cfg: &RunConfig, data: &Dataset) -> Result<ModelSpec> {
    let vocab = data.vocab().map(Vocab::len);
    let input = match (cfg.model.input, vocab) {
        (InputKind::OneHot, Some(v)) => InputSpec::OneHot { vocab: v },
        (InputKind::Embedding, Some(v)) => InputSpec::Embedding {
            vocab: v,
            dim: cfg.model.embed_dim.unwrap_or(0),
        },
        (InputKind::Dense, None) => match data {
            Dataset::Regression { train, .. } => InputSpec::Dense {
                dim: train.inputs.first().and_then(|s| s.first()).map_or(0, Vec::len),
            },
            _ => unreachable!("dense input only with regression data"),
        },
        _ => return Err(Error::Config("input kind does not fit the data".into())),
    };
    let output = match data {
        Dataset::Lm { vocab, .. } => vocab.len(),
        Dataset::Class { train, .. } => train.num_classes(),
        Dataset::Regression { train, .. } => train.targets.first().map_or(0, Vec::len),
    };
    let spec = ModelSpec {
        input,
        hidden: cfg.model.hidden.clone(),
        output,
        task: cfg.model.task,
        oov_id: vocab.map(|_| UNK),
    };
    spec.validate()?;
    Ok(spec)
}

/// Deterministic network a checkpoint describes: SNR-masked, collapsed
/// and folded for Bayesian runs, the plain tensors otherwise.
pub fn deterministic_model(model: &Model, framework: &Framework) -> Result<Model> {
    match framework {
        Framework::Bayes(b) => test_time_weights(model, b),
        _ => model.base_model(),
    }
}

/// Validation loss (nats per unit) and task metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: &'static str,
    pub value: f64,
    pub units: usize,
}

fn eval_graph(model: &Model, f: impl FnOnce(&mut Graph, &Net) -> Result<BatchGraph>) -> Result<(Graph, BatchGraph)> {
    let mut graph = Graph::new();
    let net = Net::build(&mut graph, model, &NetOptions::default(), None)?;
    let bg = f(&mut graph, &net)?;
    Ok((graph, bg))
}

/// Evaluates a deterministic model on held-out data.
pub fn evaluate(model: &Model, data: &Dataset, cfg: &RunConfig) -> Result<Evaluation> {
    match data {
        Dataset::Lm { vocab, valid, .. } => {
            let t = cfg.train.bptt;
            let lanes = (valid.len() / (t + 1)).clamp(1, cfg.train.batch_size);
            let batches = make_lm_batches(valid, lanes, t)?;
            let (loss, units) = lm_eval(model, &batches)?;
            let char_level = vocab.mode() == TokenMode::Char;
            Ok(Evaluation {
                loss,
                metric: if char_level { "bpc" } else { "perplexity" },
                value: if char_level { bits_per_char(loss) } else { perplexity(loss) },
                units,
            })
        }
        Dataset::Class {
            vocab, valid, max_len, ..
        } => {
            let order: Vec<usize> = (0..valid.examples.len()).collect();
            let mut loss = 0.0;
            let mut hits = 0;
            for b in make_class_batches(valid, vocab, &order, cfg.train.batch_size, *max_len)? {
                let (graph, bg) = eval_graph(model, |g, net| {
                    classification_loss(g, net, &b.ids, &b.lengths, &b.labels, None)
                })?;
                loss += graph.value(bg.data_loss).item() * b.labels.len() as f64;
                let logits = graph.value(bg.logits);
                for (i, &y) in b.labels.iter().enumerate() {
                    if argmax(logits.row(i)) == y {
                        hits += 1;
                    }
                }
            }
            let n = valid.examples.len();
            Ok(Evaluation {
                loss: loss / n as f64,
                metric: "accuracy",
                value: hits as f64 / n as f64,
                units: n,
            })
        }
        Dataset::Regression { valid, .. } => {
            let s = cfg.train.noise_std;
            let mut loss = 0.0;
            let n = valid.inputs.len();
            for start in (0..n).step_by(cfg.train.batch_size) {
                let end = (start + cfg.train.batch_size).min(n);
                let (graph, bg) = eval_graph(model, |g, net| {
                    regression_loss(g, net, &valid.inputs[start..end], &valid.targets[start..end], s, None)
                })?;
                loss += graph.value(bg.data_loss).item() * (end - start) as f64;
            }
            let loss = loss / n as f64;
            Ok(Evaluation {
                loss,
                metric: "mse",
                value: loss * 2.0 * s * s,
                units: n,
            })
        }
    }
}

/// Mean per-token loss over consecutive batches with carried state.
fn lm_eval(model: &Model, batches: &[LmBatch]) -> Result<(f64, usize)> {
    let mut state: Option<State> = None;
    let mut total = 0.0;
    let mut units = 0;
    for b in batches {
        let (graph, bg) = eval_graph(model, |g, net| lm_loss(g, net, &b.inputs, &b.targets, state.as_ref(), None))?;
        let n = b.inputs.len() * b.inputs[0].len();
        total += graph.value(bg.data_loss).item() * n as f64;
        units += n;
        state = bg.final_state;
    }
    if units == 0 {
        return Err(Error::Data("no validation tokens".into()));
    }
    Ok((total / units as f64, units))
}

fn nonzero_fraction(model: &Model) -> Result<f64> {
    let mut total = 0;
    let mut nz = 0;
    for n in model.weight_names() {
        let t = model.get(&n)?;
        total += t.len();
        nz += t.count_nonzero();
    }
    Ok(nz as f64 / total as f64)
}

/// Result of a training run. On a numerical failure `aborted` is set and
/// the checkpoint holds the last model that completed an epoch.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub aborted: Option<Error>,
}

/// Initial parameters for a config: plain initialization, plus variational
/// state for Bayesian runs.
pub fn initial_model(cfg: &RunConfig, spec: ModelSpec, rng: &mut SeededRng) -> Result<Model> {
    let plain = Model::init(spec, &cfg.train.init, rng)?;
    match &cfg.framework {
        Framework::Bayes(b) => make_variational(&plain, b),
        _ => Ok(plain),
    }
}

fn frozen_names(model: &Model, framework: &Framework) -> BTreeSet<String> {
    match framework {
        Framework::Bayes(b) if b.freeze_group_weights => b.group_names(model).into_iter().collect(),
        _ => BTreeSet::new(),
    }
}

struct StepContext<'a> {
    cfg: &'a RunConfig,
    frozen: BTreeSet<String>,
    groups: Option<WeightGroupIndex>,
    /// Likelihood terms per epoch; the KL is divided by it.
    units: f64,
}

/// Builds the per-unit objective for one batch; returns `(objective,
/// data_loss, final_state)`.
fn batch_objective(
    ctx: &StepContext<'_>,
    graph: &mut Graph,
    model: &Model,
    net: &Net,
    batch: &Batch<'_>,
    state: Option<&State>,
    rng: &mut SeededRng,
) -> Result<(Var, Var, Option<State>)> {
    let sampling = matches!(ctx.cfg.framework, Framework::Bayes(_));
    let r = if sampling { Some(&mut *rng) } else { None };
    let bg = match batch {
        Batch::Lm(b) => lm_loss(graph, net, &b.inputs, &b.targets, state, r)?,
        Batch::Class(b) => classification_loss(graph, net, &b.ids, &b.lengths, &b.labels, r)?,
        Batch::Reg { inputs, targets } => regression_loss(graph, net, inputs, targets, ctx.cfg.train.noise_std, r)?,
    };
    let reg = match &ctx.cfg.framework {
        Framework::Dense => None,
        Framework::Bayes(_) => net
            .kl(graph, &ctx.frozen)?
            .map(|kl| graph.scale(kl, 1.0 / ctx.units)),
        Framework::Prune(p) => penalty_term(graph, &net.leaves, model, ctx.groups.as_ref().expect("prune groups"), p)?,
    };
    let objective = match reg {
        Some(r) => graph.add(bg.data_loss, r)?,
        None => bg.data_loss,
    };
    Ok((objective, bg.data_loss, bg.final_state))
}

enum Batch<'a> {
    Lm(&'a LmBatch),
    Class(crate::data::ClassBatch),
    Reg {
        inputs: &'a [Vec<Vec<f64>>],
        targets: &'a [Vec<f64>],
    },
}

/// One optimizer step on `model`. Returns `(objective, data_loss)`.
#[allow(clippy::too_many_arguments)]
fn train_step(
    ctx: &StepContext<'_>,
    model: &mut Model,
    opt: &mut Optimizer,
    lr: f64,
    batch: &Batch<'_>,
    state: Option<&State>,
    rng: &mut SeededRng,
) -> Result<(f64, f64, Option<State>)> {
    let mut graph = Graph::new();
    let net_opts = NetOptions {
        frozen: ctx.frozen.clone(),
    };
    let sampling = matches!(ctx.cfg.framework, Framework::Bayes(_));
    let net = Net::build(&mut graph, model, &net_opts, if sampling { Some(&mut *rng) } else { None })?;
    let (objective, data_loss, final_state) = batch_objective(ctx, &mut graph, model, &net, batch, state, rng)?;
    let obj = graph.value(objective).item();
    let dl = graph.value(data_loss).item();
    if !obj.is_finite() || !dl.is_finite() {
        return Err(Error::NonFinite(format!("training objective is {obj} (data loss {dl})")));
    }
    let mut grads = graph.backward(objective)?;
    let mut named: Vec<(String, crate::tensor::Tensor)> = Vec::new();
    for (name, &v) in &net.leaves {
        if ctx.frozen.contains(name) {
            continue;
        }
        let g = grads.take(v).unwrap_or_else(|| crate::tensor::Tensor::zeros(graph.value(v).shape()));
        named.push((name.clone(), g));
    }
    if let Some(max) = ctx.cfg.optimizer.clip_norm {
        clip_global_norm(named.iter_mut().map(|(_, g)| g), max);
    }
    let mut items = Vec::with_capacity(named.len());
    let mut gi = named.iter().peekable();
    for (name, value) in model.params.iter_mut() {
        if let Some((n, g)) = gi.peek() {
            if n == name {
                items.push(ParamGrad { name, value, grad: g });
                gi.next();
            }
        }
    }
    opt.step(lr, items)?;
    if let Framework::Prune(p) = &ctx.cfg.framework {
        threshold_model(model, p.threshold)?;
    }
    Ok((obj, dl, final_state))
}

/// Trains from a fresh initialization. `observer` sees every epoch's
/// metrics as soon as they are computed.
pub fn train(cfg: &RunConfig, data: &Dataset, observer: &mut dyn FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = build_spec(cfg, data)?;
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let mut model = initial_model(cfg, spec, &mut rng)?;
    let groups = match &cfg.framework {
        Framework::Prune(p) => Some(build_groups(&model.spec, p.grouping)?),
        _ => None,
    };
    let ctx = StepContext {
        cfg,
        frozen: frozen_names(&model, &cfg.framework),
        groups,
        units: data.train_units(cfg)? as f64,
    };
    let mut opt = match cfg.optimizer.kind {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.optimizer.adam)?),
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd::default()),
    };
    let mut info = TrainingInfo {
        seed: cfg.seed,
        ..TrainingInfo::default()
    };
    let mut best: Option<(f64, usize, Model)> = None;
    let mut last_good = model.clone();
    let mut aborted = None;
    let lm_batches = match data {
        Dataset::Lm { train, .. } => Some(make_lm_batches(train, cfg.train.batch_size, cfg.train.bptt)?),
        _ => None,
    };

    'epochs: for epoch in 1..=cfg.train.epochs {
        let lr = cfg.optimizer.schedule.lr(epoch);
        let mut sum_obj = 0.0;
        let mut sum_loss = 0.0;
        let mut steps = 0usize;
        let mut run = |batch: Batch<'_>, state: Option<&State>, model: &mut Model, rng: &mut SeededRng| {
            let r = train_step(&ctx, model, &mut opt, lr, &batch, state, rng);
            if let Ok((o, l, _)) = &r {
                sum_obj += o;
                sum_loss += l;
                steps += 1;
            }
            r.map(|(_, _, s)| s)
        };
        let result: Result<()> = (|| {
            match data {
                Dataset::Lm { .. } => {
                    let mut state: Option<State> = None;
                    for b in lm_batches.as_ref().expect("lm batches") {
                        state = run(Batch::Lm(b), state.as_ref(), &mut model, &mut rng)?;
                    }
                }
                Dataset::Class {
                    vocab, train, max_len, ..
                } => {
                    let mut order: Vec<usize> = (0..train.examples.len()).collect();
                    order.shuffle(&mut rng);
                    for b in make_class_batches(train, vocab, &order, cfg.train.batch_size, *max_len)? {
                        run(Batch::Class(b), None, &mut model, &mut rng)?;
                    }
                }
                Dataset::Regression { train, .. } => {
                    let mut order: Vec<usize> = (0..train.inputs.len()).collect();
                    order.shuffle(&mut rng);
                    for chunk in order.chunks(cfg.train.batch_size) {
                        let inputs: Vec<Vec<Vec<f64>>> = chunk.iter().map(|&i| train.inputs[i].clone()).collect();
                        let targets: Vec<Vec<f64>> = chunk.iter().map(|&i| train.targets[i].clone()).collect();
                        run(
                            Batch::Reg {
                                inputs: &inputs,
                                targets: &targets,
                            },
                            None,
                            &mut model,
                            &mut rng,
                        )?;
                    }
                }
            }
            model.check_finite()
        })();
        if let Err(e) = result {
            if e.is_numerical() {
                aborted = Some(e);
                model = last_good.clone();
                break 'epochs;
            }
            return Err(e);
        }
        let det = deterministic_model(&model, &cfg.framework)?;
        let ev = evaluate(&det, data, cfg)?;
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: sum_loss / steps.max(1) as f64,
            train_objective: sum_obj / steps.max(1) as f64,
            valid_loss: ev.loss,
            metric: ev.metric.to_string(),
            valid_metric: ev.value,
            nonzero_fraction: nonzero_fraction(&det)?,
        };
        if !m.valid_loss.is_finite() {
            aborted = Some(Error::NonFinite(format!("validation loss is {}", m.valid_loss)));
            model = last_good.clone();
            break;
        }
        observer(&m);
        info.metrics.push(m);
        info.epochs_completed = epoch;
        last_good = model.clone();
        if let Some(patience) = cfg.train.patience {
            let improved = best.as_ref().is_none_or(|(l, _, _)| ev.loss < *l);
            if improved {
                best = Some((ev.loss, epoch, model.clone()));
            } else if epoch - best.as_ref().expect("set").1 >= patience {
                break;
            }
        }
    }
    if let Some((_, epoch, m)) = best {
        info.best_epoch = Some(epoch);
        model = m;
    }
    info.aborted = aborted.as_ref().map(ToString::to_string);
    let mut ckpt = Checkpoint::new(model, cfg.framework.clone(), CheckpointState::Trained);
    ckpt.meta.vocab = data.vocab().cloned();
    if let Dataset::Class { train, .. } = data {
        ckpt.meta.labels = Some(train.labels.clone());
    }
    ckpt.meta.training = info;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        aborted,
    })
}

/// Collapses a trained checkpoint into its deterministic sparse form and
/// attaches structure masks. Finalizing a finalized checkpoint returns it
/// unchanged.
pub fn finalize(ckpt: &Checkpoint) -> Result<Checkpoint> {
    let mut out = ckpt.clone();
    let masks: Vec<StructureMasks> = match &ckpt.meta.framework {
        Framework::Bayes(b) => {
            if ckpt.meta.state == CheckpointState::Trained && !ckpt.has_variational_params() {
                return Err(Error::Checkpoint(
                    "Bayesian checkpoint has no variational parameters to finalize".into(),
                ));
            }
            let s = derive_structure_bayes(&ckpt.model, b)?;
            out.model = s.model;
            if s.vocab.is_some() {
                out.meta.vocab_keep = s.vocab;
            }
            if s.features.is_some() {
                out.meta.feature_keep = s.features;
            }
            s.masks
        }
        Framework::Prune(p) => {
            let mut m = ckpt.model.base_model()?;
            threshold_model(&mut m, p.threshold)?;
            let masks = derive_structure_pruned(&m, p.grouping)?;
            out.model = m;
            masks
        }
        Framework::Dense => {
            out.model = ckpt.model.base_model()?;
            derive_structure_pruned(&out.model, Grouping::FiveGroup)?
        }
    };
    out.meta.masks = Some(masks);
    out.meta.state = CheckpointState::Finalized;
    Ok(out)
}

/// Bayesian config of a checkpoint, if it has one.
pub fn bayes_config(ckpt: &Checkpoint) -> Option<&BayesConfig> {
    match &ckpt.meta.framework {
        Framework::Bayes(b) => Some(b),
        _ => None,
    }
}
