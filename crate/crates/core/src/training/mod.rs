//! Batch gradients of the regularized log loss and the training loop.

mod gradcheck;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::time::Instant;

pub use gradcheck::{default_tolerance, gradient_check, ClassError, GradCheckReport, TensorClass};

use crate::data::{make_batches, Instance};
use crate::error::{Error, Result};
use crate::fgnet::{backward_net_into, merge_backward};
use crate::metrics::{evaluate, logloss};
use crate::numerics::sigmoid;
use crate::parallel::{self, Parallelism};
use crate::params::{adam_update, build_parameters, AdamState, Gradients, ModelConfig, ParameterSet, Variant};
use crate::scoring::{build_table, ffm_slot, resolve_ffm, score, score_resolved, FeatureRepr, ReprCache};

/// Loss of one batch under the current parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub instances: usize,
    pub mean_logloss: f64,
    pub penalty: f64,
    pub objective: f64,
}

/// Mean log loss plus the L2 penalty, scoring each instance independently.
pub fn batch_objective(batch: &[&Instance], params: &ParameterSet) -> Result<f64> {
    let mut total = 0.0;
    for inst in batch {
        total += logloss(score(inst, params)?.probability, inst.label);
    }
    Ok(total / batch.len() as f64 + params.l2_penalty(params.config.lambda))
}

/// Gradient of the batch objective with respect to every touched parameter.
///
/// Parameters the batch does not touch are absent; their L2 gradient is
/// left to lazy updates.
pub fn backward_batch(
    batch: &[&Instance],
    params: &ParameterSet,
    mode: Parallelism,
) -> Result<(Gradients, LossReport)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let (mut grads, total_loss) = if params.config.variant == Variant::Ffm {
        ffm_backward(batch, params, mode)?
    } else {
        fm_family_backward(batch, params, mode)?
    };
    let lambda = params.config.lambda;
    grads.add_l2(params, lambda);
    let mean_logloss = total_loss / batch.len() as f64;
    let penalty = params.l2_penalty(lambda);
    let report = LossReport { instances: batch.len(), mean_logloss, penalty, objective: mean_logloss + penalty };
    Ok((grads, report))
}

fn check_logit(index: usize, logit: f64) -> Result<()> {
    if logit.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { index, message: format!("logit is {logit}") })
    }
}

fn fm_family_backward(batch: &[&Instance], params: &ParameterSet, mode: Parallelism) -> Result<(Gradients, f64)> {
    let d = params.d();
    let n = batch.len() as f64;
    let (table, resolved) = build_table(params, batch.iter().copied(), mode)?;
    let forward = parallel::map(&resolved, mode, |r| score_resolved(params, &table, r));

    let mut grads = Gradients::new(params.num_fields());
    let mut loss = 0.0;
    let mut repr_grads: Vec<Vec<Vec<f64>>> = table.reprs.iter().map(|r| vec![vec![0.0; d]; r.vectors.len()]).collect();
    for (i, ((s, sum), r)) in forward.iter().zip(&resolved).enumerate() {
        check_logit(i, s.logit)?;
        let y = batch[i].label;
        loss += logloss(s.probability, y);
        let g = (s.probability - y as f64) / n;
        grads.bias += g;
        for &(slot, x) in &r.slots {
            let repr = &table.reprs[slot];
            *grads.linear.entry(repr.id).or_insert(0.0) += g * x;
            // ∂/∂r of ½(‖Σa‖² − Σ‖a‖²) with a = r·x is x·(Σa − a)
            for (acc, v) in repr_grads[slot].iter_mut().zip(&repr.vectors) {
                for k in 0..d {
                    acc[k] += g * x * (sum[k] - x * v[k]);
                }
            }
        }
    }

    let mut by_field: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (slot, repr) in table.reprs.iter().enumerate() {
        by_field.entry(repr.field).or_default().push(slot);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_field.into_iter().collect();
    let per_field = parallel::map(&groups, mode, |(field, slots)| {
        field_backward(params, *field, slots.iter().map(|&s| (&table.reprs[s], &repr_grads[s])))
    });
    for ((field, _), result) in groups.iter().zip(per_field) {
        let (dense, rows) = result?;
        if !dense.is_empty() {
            grads.fields[*field] = Some(dense);
        }
        grads.embedding.extend(rows);
    }
    Ok((grads, loss))
}

/// Dense tensor gradients of one field, and `(feature id, embedding gradient)` rows.
type FieldGrads = (Vec<Vec<f64>>, Vec<(usize, Vec<f64>)>);

/// Backpropagates representation gradients of one field's features into
/// embeddings and the field's dense tensors.
fn field_backward<'a>(
    params: &ParameterSet,
    field: usize,
    items: impl Iterator<Item = (&'a FeatureRepr, &'a Vec<Vec<f64>>)>,
) -> Result<FieldGrads> {
    let mut dense = params.zero_field_grads(field);
    let nets = &params.fgnets[field];
    let per_net = nets.first().map_or(0, |n| 2 * n.layers.len());
    let mut rows = Vec::new();
    for (repr, g) in items {
        let emb = match &repr.cache {
            ReprCache::Plain => g[0].clone(),
            ReprCache::Added(fs) => {
                let mut emb = g[0].clone();
                for (j, net) in nets.iter().enumerate() {
                    let acc = &mut dense[j * per_net..(j + 1) * per_net];
                    let input = backward_net_into(net, &fs.caches[j], &g[j + 1], acc);
                    emb.iter_mut().zip(input).for_each(|(e, x)| *e += x);
                }
                emb
            }
            ReprCache::Merged(fs, merged) => {
                let mg = merge_backward(&g[0], merged, fs, params.layer_norms.get(field))?;
                let mut emb = mg.origin.into_inner();
                for (j, net) in nets.iter().enumerate() {
                    let acc = &mut dense[j * per_net..(j + 1) * per_net];
                    let input = backward_net_into(net, &fs.caches[j], &mg.generated[j], acc);
                    emb.iter_mut().zip(input).for_each(|(e, x)| *e += x);
                }
                if let Some(ln) = mg.layer_norm {
                    let base = nets.len() * per_net;
                    dense[base].iter_mut().zip(ln.gain.iter()).for_each(|(a, b)| *a += b);
                    dense[base + 1].iter_mut().zip(ln.bias.iter()).for_each(|(a, b)| *a += b);
                }
                emb
            }
        };
        rows.push((repr.id, emb));
    }
    Ok((dense, rows))
}

fn ffm_backward(batch: &[&Instance], params: &ParameterSet, mode: Parallelism) -> Result<(Gradients, f64)> {
    let d = params.d();
    let slots = params.slots();
    let n = batch.len() as f64;
    let forward = parallel::map(batch, mode, |inst| -> Result<_> {
        let active = resolve_ffm(inst, params)?;
        let mut logit = params.bias;
        for (i, &(id_i, f_i, x_i)) in active.iter().enumerate() {
            logit += params.linear[id_i] * x_i;
            for &(id_j, f_j, x_j) in &active[i + 1..] {
                let a = params.embedding_slot(id_i, ffm_slot(f_i, f_j));
                let b = params.embedding_slot(id_j, ffm_slot(f_j, f_i));
                logit += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() * x_i * x_j;
            }
        }
        Ok((active, logit))
    });

    let mut grads = Gradients::new(params.num_fields());
    let mut rows: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut loss = 0.0;
    for (i, result) in forward.into_iter().enumerate() {
        let (active, logit) = result?;
        check_logit(i, logit)?;
        let p = sigmoid(logit);
        let y = batch[i].label;
        loss += logloss(p, y);
        let g = (p - y as f64) / n;
        grads.bias += g;
        for (a, &(id_i, f_i, x_i)) in active.iter().enumerate() {
            *grads.linear.entry(id_i).or_insert(0.0) += g * x_i;
            for &(id_j, f_j, x_j) in &active[a + 1..] {
                let (si, sj) = (ffm_slot(f_i, f_j), ffm_slot(f_j, f_i));
                let (vi, vj) = (params.embedding_slot(id_i, si), params.embedding_slot(id_j, sj));
                let scale = g * x_i * x_j;
                let gi = rows.entry(id_i * slots + si).or_insert_with(|| vec![0.0; d]);
                gi.iter_mut().zip(vj).for_each(|(acc, v)| *acc += scale * v);
                let gj = rows.entry(id_j * slots + sj).or_insert_with(|| vec![0.0; d]);
                gj.iter_mut().zip(vi).for_each(|(acc, v)| *acc += scale * v);
            }
        }
    }
    grads.embedding = rows.into_iter().collect();
    Ok((grads, loss))
}

/// Mean log loss plus penalty over a whole dataset.
pub fn dataset_objective(instances: &[Instance], params: &ParameterSet, mode: Parallelism) -> Result<f64> {
    let scores = crate::scoring::score_batch(instances, params, mode)?;
    let total: f64 = scores.iter().zip(instances).map(|(s, i)| logloss(s.probability, i.label)).sum();
    Ok(total / instances.len() as f64 + params.l2_penalty(params.config.lambda))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Epochs without a validation AUC improvement before stopping.
    pub patience: usize,
    pub parallelism: Parallelism,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { patience: 2, parallelism: Parallelism::Sequential }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective over the full training set after the epoch.
    pub objective: f64,
    pub val_auc: f64,
    pub val_logloss: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={}\tobjective={:.6}\tval_auc={:.6}\tval_logloss={:.6}\tseconds={:.3}",
            self.epoch, self.objective, self.val_auc, self.val_logloss, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub initial_objective: f64,
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters are returned; 0 if no epoch improved on the start.
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub stopped_early: bool,
}

/// Trains with Adam, keeping the parameters of the best validation AUC.
pub fn train(
    config: &ModelConfig,
    train_set: &[Instance],
    validation: &[Instance],
    options: &TrainOptions,
) -> Result<(TrainRun, ParameterSet)> {
    train_with(config, train_set, validation, options, |_| {})
}

/// [`train`], calling `on_epoch` after each epoch.
pub fn train_with(
    config: &ModelConfig,
    train_set: &[Instance],
    validation: &[Instance],
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainRun, ParameterSet)> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mode = options.parallelism;
    let mut params = build_parameters(config)?;
    let mut adam = AdamState::new(&params);
    let initial_objective = dataset_objective(train_set, &params, mode)?;
    let mut best = params.clone();
    let mut best_auc = evaluate(&params, validation, mode)?.auc;
    let mut run = TrainRun {
        initial_objective,
        records: Vec::new(),
        best_epoch: 0,
        best_val_auc: best_auc,
        stopped_early: false,
    };
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let order = make_batches(
            train_set.len(),
            config.batch_size,
            config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64),
        )?;
        for idx in &order {
            let batch: Vec<&Instance> = idx.iter().map(|&i| &train_set[i]).collect();
            let (grads, report) = backward_batch(&batch, &params, mode)?;
            if !report.objective.is_finite() {
                return Err(Error::Numeric {
                    index: 0,
                    message: format!("objective became {} in epoch {epoch}", report.objective),
                });
            }
            adam_update(&mut params, &mut adam, &grads, config.learning_rate)?;
        }
        if !params.is_finite() {
            return Err(Error::Numeric { index: 0, message: format!("parameters became non-finite in epoch {epoch}") });
        }
        let objective = dataset_objective(train_set, &params, mode)?;
        let val = evaluate(&params, validation, mode)?;
        let record = EpochRecord {
            epoch,
            objective,
            val_auc: val.auc,
            val_logloss: val.logloss,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        run.records.push(record);
        if val.auc > best_auc {
            best_auc = val.auc;
            best = params.clone();
            run.best_epoch = epoch;
            run.best_val_auc = val.auc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= options.patience {
                run.stopped_early = epoch < config.epochs;
                break;
            }
        }
    }
    Ok((run, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Entry;

    fn inst(label: u8, entries: &[(usize, usize, f64)]) -> Instance {
        Instance::new(label, entries.iter().map(|&(f, j, x)| Entry::new(f, j, x)).collect())
    }

    #[test]
    fn rejects_empty_and_bad_batches() {
        let p = build_parameters(&ModelConfig::new(Variant::Fm, vec![2])).unwrap();
        assert!(backward_batch(&[], &p, Parallelism::Sequential).is_err());
        let bad = inst(1, &[(0, 5, 1.0)]);
        assert!(matches!(backward_batch(&[&bad], &p, Parallelism::Sequential), Err(Error::Lookup { .. })));
    }

    #[test]
    fn non_finite_logit_names_the_instance() {
        let mut p = build_parameters(&ModelConfig::new(Variant::Fm, vec![2])).unwrap();
        p.linear[1] = f64::INFINITY;
        let a = inst(1, &[(0, 0, 1.0)]);
        let b = inst(0, &[(0, 1, 1.0)]);
        match backward_batch(&[&a, &b], &p, Parallelism::Sequential) {
            Err(Error::Numeric { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }

    #[test]
    fn untouched_rows_are_absent() {
        let c = ModelConfig { d: 3, u: 2, ..ModelConfig::new(Variant::LaFm, vec![4, 3]) };
        let p = build_parameters(&c).unwrap();
        let a = inst(1, &[(0, 1, 1.0), (1, 2, 1.0)]);
        let (g, _) = backward_batch(&[&a], &p, Parallelism::Sequential).unwrap();
        assert_eq!(g.embedding.keys().copied().collect::<Vec<_>>(), vec![1, 6]);
        assert_eq!(g.linear.len(), 2);
        assert!(g.fields.iter().all(Option::is_some));
        let b = inst(1, &[(0, 1, 1.0)]);
        let (g, _) = backward_batch(&[&b], &p, Parallelism::Sequential).unwrap();
        assert!(g.fields[0].is_some() && g.fields[1].is_none());
    }

    #[test]
    fn parallel_gradients_are_bit_identical() {
        for variant in Variant::ALL {
            let c = ModelConfig { d: 4, u: 1, ..ModelConfig::new(variant, vec![5, 4, 1]) };
            let p = build_parameters(&c).unwrap();
            let batch: Vec<Instance> = (0..64)
                .map(|k| inst((k % 3 == 0) as u8, &[(0, k % 5, 1.0), (1, k % 4, 1.0), (2, 0, (k as f64 * 0.37).sin())]))
                .collect();
            let refs: Vec<&Instance> = batch.iter().collect();
            let seq = backward_batch(&refs, &p, Parallelism::Sequential).unwrap();
            let par = parallel::with_threads(4, || backward_batch(&refs, &p, Parallelism::Parallel).unwrap());
            assert_eq!(seq, par, "{variant}");
        }
    }

    #[test]
    fn logistic_regression_objective_decreases() {
        // zero embeddings stay zero (their gradient is zero), so only w0 and w learn
        let mut c = ModelConfig::new(Variant::Fm, vec![4, 4]);
        c.learning_rate = 1e-3;
        c.lambda = 0.0;
        c.batch_size = 8;
        let data: Vec<Instance> =
            (0..64).map(|k| inst((k % 4 < 2) as u8, &[(0, k % 4, 1.0), (1, (k / 4) % 4, 1.0)])).collect();
        let mut params = build_parameters(&c).unwrap();
        params.embeddings.iter_mut().for_each(|v| *v = 0.0);
        let mut adam = AdamState::new(&params);
        let mut last = dataset_objective(&data, &params, Parallelism::Sequential).unwrap();
        for epoch in 0..20 {
            for idx in make_batches(data.len(), c.batch_size, epoch).unwrap() {
                let batch: Vec<&Instance> = idx.iter().map(|&i| &data[i]).collect();
                let (g, _) = backward_batch(&batch, &params, Parallelism::Sequential).unwrap();
                adam_update(&mut params, &mut adam, &g, c.learning_rate).unwrap();
            }
            let obj = dataset_objective(&data, &params, Parallelism::Sequential).unwrap();
            assert!(obj < last, "epoch {epoch}: {obj} >= {last}");
            last = obj;
        }
        assert!(params.embeddings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn record_log_line() {
        let r = EpochRecord { epoch: 3, objective: 0.5, val_auc: 0.75, val_logloss: 0.45, seconds: 1.5 };
        assert_eq!(r.log_line(), "epoch=3\tobjective=0.500000\tval_auc=0.750000\tval_logloss=0.450000\tseconds=1.500");
    }
}
