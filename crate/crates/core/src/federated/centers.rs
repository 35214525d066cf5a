//! Local cluster centers, their server-side aggregation and the final
//! parameter averaging.

use super::messages::{CenterMessage, GlobalCenters};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{argmax, Matrix};

/// Hard-assigns each row to `argmax_k q_ik` and averages the assigned
/// representations. Clusters with no members keep the `fallback` row.
pub fn compute_local_centers(e: &Matrix, q: &Matrix, fallback: &Matrix) -> Result<(Matrix, Vec<u64>)> {
    let (n, d) = e.shape();
    let k = q.cols();
    if q.rows() != n {
        return Err(Error::invalid(format!(
            "{n} representations but {} pseudo-labels",
            q.rows()
        )));
    }
    if fallback.shape() != (k, d) {
        return Err(Error::invalid(format!(
            "fallback centers are {:?}, expected {:?}",
            fallback.shape(),
            (k, d)
        )));
    }
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0u64; k];
    for i in 0..n {
        let c = argmax(q.row(i));
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(e.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            sums.row_mut(c).copy_from_slice(fallback.row(c));
        } else {
            let inv = counts[c] as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v /= inv);
        }
    }
    Ok((sums, counts))
}

/// Count-weighted mean of the clients' centers, cluster by cluster.
///
/// Messages are processed in client-id order. Each cluster is accumulated
/// as offsets from the first contributing client, so a single client, or
/// clients that all agree, reproduce their centers exactly. Clusters with
/// no members anywhere keep `previous`.
pub fn aggregate_global_centers(messages: &[CenterMessage], previous: &GlobalCenters) -> Result<GlobalCenters> {
    let first = messages
        .first()
        .ok_or_else(|| Error::invalid("no client centers to aggregate"))?;
    let (k, d) = first.centers.shape();
    if previous.c.shape() != (k, d) {
        return Err(Error::invalid("previous global centers have the wrong shape"));
    }
    for m in messages {
        if m.centers.shape() != (k, d) || m.counts.len() != k {
            return Err(Error::invalid(format!(
                "client {} sent centers of inconsistent shape",
                m.client_id
            )));
        }
    }
    let mut order: Vec<&CenterMessage> = messages.iter().collect();
    order.sort_by_key(|m| m.client_id);
    for pair in order.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::invalid(format!(
                "duplicate centers from client {}",
                pair[0].client_id
            )));
        }
    }

    let mut c = previous.c.clone();
    for kk in 0..k {
        let total: u64 = order.iter().map(|m| m.counts[kk]).sum();
        if total == 0 {
            continue;
        }
        let reference = order.iter().find(|m| m.counts[kk] > 0).expect("nonzero total");
        let base = reference.centers.row(kk);
        let mut acc = vec![0.0; d];
        for m in &order {
            if m.counts[kk] == 0 || std::ptr::eq(*m, *reference) {
                continue;
            }
            let share = m.counts[kk] as f64 / total as f64;
            for ((a, v), b) in acc.iter_mut().zip(m.centers.row(kk)).zip(base) {
                *a += share * (v - b);
            }
        }
        for ((out, b), a) in c.row_mut(kk).iter_mut().zip(base).zip(&acc) {
            *out = if *a == 0.0 { *b } else { b + a };
        }
    }
    Ok(GlobalCenters {
        c,
        round: order.iter().map(|m| m.round).max().unwrap_or(previous.round),
    })
}

/// Parameter-wise convex combination `Σ α_μ Φ_μ`, computed as offsets from
/// the first model so identical inputs come back unchanged.
pub fn average_models(models: &[ModelParams], alphas: &[f64]) -> Result<ModelParams> {
    let first = models.first().ok_or_else(|| Error::invalid("no models to average"))?;
    if alphas.len() != models.len() {
        return Err(Error::invalid(format!(
            "{} models but {} weights",
            models.len(),
            alphas.len()
        )));
    }
    if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::invalid("averaging weights must be finite and nonnegative"));
    }
    let total: f64 = alphas.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("averaging weights sum to {total}, not 1")));
    }
    if let Some(i) = models.iter().position(|m| !m.same_shape(first)) {
        return Err(Error::invalid(format!("model {i} has a different shape from model 0")));
    }
    let base = first.flatten();
    let mut acc = vec![0.0; base.len()];
    for (model, &alpha) in models.iter().zip(alphas).skip(1) {
        for ((a, v), b) in acc.iter_mut().zip(model.flatten()).zip(&base) {
            *a += alpha * (v - b);
        }
    }
    let mut out = first.clone();
    let mut flat = base.iter().zip(&acc).map(|(&b, &a)| if a == 0.0 { b } else { b + a });
    for (_, _, t) in out.tensors_mut() {
        for (slot, v) in t.iter_mut().zip(&mut flat) {
            *slot = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};
    use crate::numerics::Rng;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn msg(id: u32, c: Matrix, counts: Vec<u64>) -> CenterMessage {
        CenterMessage {
            client_id: id,
            round: 1,
            centers: c,
            counts,
        }
    }

    fn zeros(k: usize, d: usize) -> GlobalCenters {
        GlobalCenters {
            c: Matrix::zeros(k, d),
            round: 0,
        }
    }

    #[test]
    fn local_center_is_a_mean() {
        let e = Matrix::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4]]).unwrap();
        let fallback = Matrix::filled(2, 2, 7.0);
        let (c, counts) = compute_local_centers(&e, &q, &fallback).unwrap();
        assert_eq!(c.row(0), &[1.0, 1.0]);
        assert_eq!(c.row(1), &[7.0, 7.0]);
        assert_eq!(counts, vec![2, 0]);
    }

    #[test]
    fn ties_go_to_the_lowest_cluster() {
        let e = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(
            compute_local_centers(&e, &q, &Matrix::zeros(2, 1)).unwrap().1,
            vec![1, 0]
        );
    }

    #[test]
    fn local_centers_match_scalar_loops() {
        let mut rng = Rng::new(3);
        let (n, k, d) = (30, 4, 5);
        let e = random(n, d, &mut rng);
        let q = random(n, k, &mut rng);
        let (c, counts) = compute_local_centers(&e, &q, &Matrix::zeros(k, d)).unwrap();
        for kk in 0..k {
            let members: Vec<usize> = (0..n)
                .filter(|&i| (0..k).all(|j| q[(i, j)] < q[(i, kk)] || (q[(i, j)] == q[(i, kk)] && j >= kk)))
                .collect();
            assert_eq!(counts[kk], members.len() as u64);
            for t in 0..d {
                let mut s = 0.0;
                for &i in &members {
                    s += e[(i, t)];
                }
                let expect = if members.is_empty() {
                    0.0
                } else {
                    s / members.len() as f64
                };
                assert_eq!(c[(kk, t)], expect);
            }
        }
    }

    #[test]
    fn weighted_mean_of_two_clients() {
        let a = msg(0, Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap(), vec![1]);
        let b = msg(1, Matrix::from_rows(&[vec![3.0, 3.0]]).unwrap(), vec![2]);
        let g = aggregate_global_centers(&[a, b], &zeros(1, 2)).unwrap();
        assert_eq!(g.c.row(0), &[2.0, 2.0]);
    }

    #[test]
    fn single_client_is_returned_bitwise() {
        let c = random(3, 4, &mut Rng::new(1));
        let g = aggregate_global_centers(&[msg(5, c.clone(), vec![2, 9, 1])], &zeros(3, 4)).unwrap();
        assert_eq!(g.c, c);
    }

    #[test]
    fn agreeing_clients_are_conserved() {
        let c = random(3, 4, &mut Rng::new(2));
        let msgs: Vec<_> = (0..5)
            .map(|i| msg(i, c.clone(), vec![1 + i as u64, 3, 7 * i as u64 + 1]))
            .collect();
        assert_eq!(aggregate_global_centers(&msgs, &zeros(3, 4)).unwrap().c, c);
    }

    #[test]
    fn empty_cluster_keeps_previous_value() {
        let prev = GlobalCenters {
            c: Matrix::from_rows(&[vec![1.0], vec![-4.0]]).unwrap(),
            round: 3,
        };
        let m = msg(0, Matrix::from_rows(&[vec![9.0], vec![9.0]]).unwrap(), vec![4, 0]);
        let g = aggregate_global_centers(&[m], &prev).unwrap();
        assert_eq!(g.c.as_slice(), &[9.0, -4.0]);
        assert!(aggregate_global_centers(&[], &prev).is_err());
    }

    #[test]
    fn three_clients_match_scalar_loops_in_any_order() {
        let mut rng = Rng::new(9);
        let (k, d) = (3, 4);
        let msgs: Vec<CenterMessage> = (0..3)
            .map(|i| msg(i, random(k, d, &mut rng), (0..k).map(|_| rng.below(5) as u64).collect()))
            .collect();
        let g = aggregate_global_centers(&msgs, &zeros(k, d)).unwrap();
        for kk in 0..k {
            let total: u64 = msgs.iter().map(|m| m.counts[kk]).sum();
            for t in 0..d {
                let expect = if total == 0 {
                    0.0
                } else {
                    msgs.iter()
                        .map(|m| m.counts[kk] as f64 * m.centers[(kk, t)])
                        .sum::<f64>()
                        / total as f64
                };
                assert!((g.c[(kk, t)] - expect).abs() < 1e-12);
            }
        }
        let mut reversed = msgs.clone();
        reversed.reverse();
        assert_eq!(aggregate_global_centers(&reversed, &zeros(k, d)).unwrap(), g);
    }

    fn model(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            input_dim: 3,
            hidden_dim: Some(4),
            clusters: 2,
            adapter: true,
            activation: Activation::Tanh,
        };
        let mut rng = Rng::new(seed);
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        for (_, _, t) in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
        }
        p
    }

    #[test]
    fn identical_models_average_to_themselves() {
        let p = model(1);
        let avg = average_models(&[p.clone(), p.clone(), p.clone()], &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(avg, p);
    }

    #[test]
    fn averaging_matches_scalar_loops() {
        let ms = [model(1), model(2), model(3)];
        let alphas = [0.5, 0.3, 0.2];
        let avg = average_models(&ms, &alphas).unwrap().flatten();
        let flats: Vec<Vec<f64>> = ms.iter().map(ModelParams::flatten).collect();
        for i in 0..avg.len() {
            let expect: f64 = (0..3).map(|m| alphas[m] * flats[m][i]).sum();
            assert!((avg[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn averaging_rejects_bad_inputs() {
        assert!(average_models(&[model(1), model(2)], &[0.5, 0.6]).is_err());
        assert!(average_models(&[model(1)], &[0.5, 0.5]).is_err());
        assert!(average_models(&[], &[]).is_err());
        let mut other = model(2);
        other.adapter = None;
        assert!(average_models(&[model(1), other], &[0.5, 0.5]).is_err());
    }
}
