/// Average precision of `scores` against binary `targets`, over pixels with a
/// nonzero mask: precision at each positive in descending-score order,
/// averaged over positives. Ties rank negatives first. `None` when no masked
/// pixel is positive.
pub fn average_precision(scores: &[f64], targets: &[u8], mask: &[u8]) -> Option<f64> {
    let mut px: Vec<(f64, bool)> = scores
        .iter()
        .zip(targets)
        .zip(mask)
        .filter(|(_, &m)| m != 0)
        .map(|((&s, &t), _)| (s, t != 0))
        .collect();
    let positives = px.iter().filter(|p| p.1).count();
    if positives == 0 {
        return None;
    }
    px.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &(_, pos)) in px.iter().enumerate() {
        if pos {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(acc / positives as f64)
}

/// Mean AP over samples plus the number skipped for lacking positives.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MapScore {
    pub map: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

pub fn mean_average_precision<'a>(items: impl Iterator<Item = (&'a [f64], &'a [u8], &'a [u8])>) -> MapScore {
    let mut s = MapScore::default();
    let mut total = 0.0;
    for (sc, t, m) in items {
        match average_precision(sc, t, m) {
            Some(ap) => {
                total += ap;
                s.evaluated += 1;
            }
            None => s.skipped += 1,
        }
    }
    s.map = if s.evaluated > 0 { total / s.evaluated as f64 } else { 0.0 };
    s
}
