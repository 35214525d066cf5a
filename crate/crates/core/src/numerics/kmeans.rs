use super::{matrix::sq_euclidean, Matrix, Rng};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Matrix,
    pub inertia: f64,
    /// Inertia after every assignment step, in order.
    pub history: Vec<f64>,
    pub iterations: usize,
}

/// Best of `restarts` independent runs by final inertia; ties keep the
/// earliest run.
pub fn kmeans_restarts(x: &Matrix, k: usize, rng: &mut Rng, max_iters: usize, restarts: usize) -> Result<KMeansResult> {
    let mut best = kmeans(x, k, rng, max_iters)?;
    for _ in 1..restarts {
        let run = kmeans(x, k, rng, max_iters)?;
        if run.inertia < best.inertia {
            best = run;
        }
    }
    Ok(best)
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// A cluster that loses all its points is re-seeded with the point farthest
/// from its current center.
pub fn kmeans(x: &Matrix, k: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeansResult> {
    let n = x.rows();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n < k {
        return Err(Error::invalid(format!("k-means needs at least k={k} points, got {n}")));
    }
    if !x.is_finite() {
        return Err(Error::invalid("k-means input contains non-finite values"));
    }

    let mut centers = seed_plus_plus(x, k, rng);
    let mut assignments = vec![0usize; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    let mut inertia = assign(x, &centers, &mut assignments);
    history.push(inertia);

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        update_centers(x, &mut centers, &mut assignments);
        let next = assign(x, &centers, &mut assignments);
        history.push(next);
        let done = next >= inertia || (inertia - next) <= 1e-12 * inertia.max(1e-300);
        inertia = next;
        if done {
            break;
        }
    }

    Ok(KMeansResult {
        assignments,
        centers,
        inertia,
        history,
        iterations,
    })
}

fn seed_plus_plus(x: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = x.rows();
    let mut centers = Matrix::zeros(k, x.cols());
    let first = rng.below(n);
    centers.row_mut(0).copy_from_slice(x.row(first));
    let mut dist: Vec<f64> = x.row_iter().map(|r| sq_euclidean(r, centers.row(0))).collect();

    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // every point coincides with an existing center
            rng.below(n)
        };
        centers.row_mut(c).copy_from_slice(x.row(pick));
        for (d, r) in dist.iter_mut().zip(x.row_iter()) {
            *d = d.min(sq_euclidean(r, centers.row(c)));
        }
    }
    centers
}

fn assign(x: &Matrix, centers: &Matrix, assignments: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, r) in x.row_iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.row_iter().enumerate() {
            let d = sq_euclidean(r, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignments[i] = best;
        inertia += best_d;
    }
    inertia
}

fn update_centers(x: &Matrix, centers: &mut Matrix, assignments: &mut [usize]) {
    let (k, d) = centers.shape();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (r, &a) in x.row_iter().zip(assignments.iter()) {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(r) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        // farthest point from its own center, taken from a cluster that can spare it
        let mut far = None;
        let mut far_d = -1.0;
        for (i, r) in x.row_iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let dd = sq_euclidean(r, centers.row(a));
            if dd > far_d {
                far_d = dd;
                far = Some(i);
            }
        }
        if let Some(i) = far {
            counts[assignments[i]] -= 1;
            assignments[i] = c;
            counts[c] = 1;
            centers.row_mut(c).copy_from_slice(x.row(i));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_pairs() {
        let x = Matrix::from_vec(4, 1, vec![0.0, 0.1, 10.0, 10.1]).unwrap();
        let res = kmeans(&x, 2, &mut Rng::new(1), 100).unwrap();
        let mut c: Vec<f64> = res.centers.as_slice().to_vec();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.05).abs() < 1e-12);
        assert!((c[1] - 10.05).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![-1.0, 5.0]]).unwrap();
        let res = kmeans(&x, 3, &mut Rng::new(9), 50).unwrap();
        assert_eq!(res.inertia, 0.0);
        let mut a = res.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn too_few_points() {
        let x = Matrix::zeros(2, 3);
        assert!(matches!(
            kmeans(&x, 3, &mut Rng::new(0), 10),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let x = Matrix::from_vec(5, 1, vec![1.0, 1.0, 1.0, 1.0, 2.0]).unwrap();
        let res = kmeans(&x, 3, &mut Rng::new(4), 20).unwrap();
        assert!(res.centers.is_finite());
        assert_eq!(res.assignments.len(), 5);
    }

    fn random_points(n: usize, rng: &mut Rng) -> Matrix {
        let data = (0..n * 2).map(|_| rng.normal() * 3.0).collect();
        Matrix::from_vec(n, 2, data).unwrap()
    }

    #[test]
    fn beats_random_assignments() {
        let mut rng = Rng::new(11);
        let x = random_points(50, &mut rng);
        let res = kmeans(&x, 3, &mut Rng::new(12), 100).unwrap();

        // oracle: inertia of random labelings evaluated at their own means
        for _ in 0..100 {
            let labels: Vec<usize> = (0..50).map(|_| rng.below(3)).collect();
            let mut inertia = 0.0;
            for c in 0..3 {
                let members: Vec<usize> = (0..50).filter(|&i| labels[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                let mut mean = [0.0; 2];
                for &i in &members {
                    mean[0] += x[(i, 0)] / members.len() as f64;
                    mean[1] += x[(i, 1)] / members.len() as f64;
                }
                for &i in &members {
                    inertia += sq_euclidean(x.row(i), &mean);
                }
            }
            assert!(res.inertia <= inertia + 1e-9);
        }
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = Rng::new(21);
        for trial in 0..20 {
            let x = random_points(60, &mut rng);
            let res = kmeans(&x, 4, &mut Rng::new(trial), 100).unwrap();
            for w in res.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", res.history);
            }
        }
    }

    #[test]
    fn same_seed_same_result() {
        let x = random_points(40, &mut Rng::new(5));
        let a = kmeans(&x, 3, &mut Rng::new(77), 50).unwrap();
        let b = kmeans(&x, 3, &mut Rng::new(77), 50).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centers, b.centers);
    }

    #[test]
    fn restarts_never_worse_than_first_run() {
        let x = random_points(60, &mut Rng::new(8));
        let single = kmeans(&x, 4, &mut Rng::new(3), 50).unwrap();
        let best = kmeans_restarts(&x, 4, &mut Rng::new(3), 50, 8).unwrap();
        assert!(best.inertia <= single.inertia);
    }
}
