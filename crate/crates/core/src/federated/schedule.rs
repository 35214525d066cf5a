/// Iterations (1-based) at which pseudo-labels are refreshed:
/// `round(T^{j/u})` for `j = 1..=u`, deduplicated and at least 1.
pub fn pseudo_label_schedule(total_iters: usize, updates: usize) -> Vec<usize> {
    if total_iters == 0 || updates == 0 {
        return Vec::new();
    }
    let t = total_iters as f64;
    let mut out: Vec<usize> = (1..=updates)
        .map(|j| (t.powf(j as f64 / updates as f64).round() as usize).clamp(1, total_iters))
        .collect();
    out.dedup();
    out
}

/// One refresh per pass over the shard, never fewer than one.
pub fn default_schedule_updates(total_iters: usize, batch_size: usize, shard_len: usize) -> usize {
    if shard_len == 0 {
        return 1;
    }
    let seen = total_iters.saturating_mul(batch_size.min(shard_len));
    seen.div_ceil(shard_len).max(1)
}
