//! Mask Distance sample aggregation.
//!
//! Queries of an incoming sample are matched to the queries of the running
//! mean by the Euclidean distance between their sigmoid masks, then the
//! permuted sample is folded into the mean in logit space. Only the mean and
//! the incoming sample are ever resident, whatever the ensemble size.

use crate::align::AlignedEnsemble;
use crate::error::{Error, Result};
use crate::model::{sigmoid, LogitView, SampleTensor, TransformDescriptor};
use crate::residency::Resident;

/// Pixels processed per chunk when accumulating distances.
const DISTANCE_CHUNK: usize = 4096;

/// Square matrix of distances, `get(a, b)` = incoming query `a` vs reference query `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {n}x{n} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("distance matrix must be finite".into()));
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("distance matrix must be square".into()));
        }
        Self::new(n, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.n + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.data[a * self.n..(a + 1) * self.n]
    }
}

/// Bijection from incoming query index to reference query index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MatchPermutation(Vec<usize>);

impl MatchPermutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &b in &map {
            if b >= map.len() || std::mem::replace(&mut seen[b], true) {
                return Err(Error::InvalidArgument(format!("{map:?} is not a permutation")));
            }
        }
        Ok(Self(map))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn target(&self, incoming: usize) -> usize {
        self.0[incoming]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn cost(&self, d: &DistanceMatrix) -> f64 {
        self.0.iter().enumerate().map(|(a, &b)| d.get(a, b)).sum()
    }

    /// The map `b -> a`.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (a, &b) in self.0.iter().enumerate() {
            inv[b] = a;
        }
        Self(inv)
    }
}

fn distances_from<F>(reference: F, next: &SampleTensor) -> DistanceMatrix
where
    F: Fn(usize, std::ops::Range<usize>, &mut Vec<f64>),
{
    let p = next.queries();
    let plane = next.pixels();
    let mut sq = vec![0f64; p * p];
    let mut ref_sig: Vec<Vec<f64>> = vec![Vec::with_capacity(DISTANCE_CHUNK); p];
    let mut next_sig: Vec<Vec<f64>> = vec![Vec::with_capacity(DISTANCE_CHUNK); p];
    let mut start = 0;
    while start < plane {
        let end = (start + DISTANCE_CHUNK).min(plane);
        for q in 0..p {
            ref_sig[q].clear();
            reference(q, start..end, &mut ref_sig[q]);
            next_sig[q].clear();
            next_sig[q].extend(next.mask(q)[start..end].iter().map(|&v| sigmoid(v as f64)));
        }
        for a in 0..p {
            let na = &next_sig[a];
            for b in 0..p {
                let rb = &ref_sig[b];
                let mut acc = 0.0;
                for (x, y) in na.iter().zip(rb) {
                    let d = x - y;
                    acc += d * d;
                }
                sq[a * p + b] += acc;
            }
        }
        start = end;
    }
    DistanceMatrix {
        n: p,
        data: sq.into_iter().map(f64::sqrt).collect(),
    }
}

fn check_match_shapes(r_queries: usize, r_dims: (usize, usize), next: &SampleTensor) -> Result<()> {
    if r_queries != next.queries() || r_dims != next.dims() {
        return Err(Error::ShapeMismatch(format!(
            "reference has {r_queries} queries at {r_dims:?}, incoming has {} at {:?}",
            next.queries(),
            next.dims()
        )));
    }
    Ok(())
}

/// `D[a][b] = || sigmoid(M_next[a]) - sigmoid(M_ref[b]) ||_2` over all pixels.
pub fn mask_distance_matrix(reference: &SampleTensor, next: &SampleTensor) -> Result<DistanceMatrix> {
    check_match_shapes(reference.queries(), reference.dims(), next)?;
    Ok(distances_from(
        |q, range, out| out.extend(reference.mask(q)[range].iter().map(|&v| sigmoid(v as f64))),
        next,
    ))
}

/// Globally greedy assignment without replacement.
///
/// Repeatedly takes the smallest remaining `(a, b)` pair; ties go to the lower
/// `a`, then the lower `b`.
pub fn greedy_match(d: &DistanceMatrix) -> MatchPermutation {
    let n = d.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            pairs.push((d.get(a, b), a, b));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut map = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    let mut left = n;
    for (_, a, b) in pairs {
        if left == 0 {
            break;
        }
        if map[a] == usize::MAX && !taken[b] {
            map[a] = b;
            taken[b] = true;
            left -= 1;
        }
    }
    MatchPermutation(map)
}

/// Minimum-cost bijection (Kuhn-Munkres with potentials, O(n^3)).
pub fn hungarian_match(d: &DistanceMatrix) -> MatchPermutation {
    let n = d.len();
    if n == 0 {
        return MatchPermutation(Vec::new());
    }
    // 1-based arrays; column 0 is the virtual start column.
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = d.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut map = vec![0; n];
    for j in 1..=n {
        map[row_of[j] - 1] = j - 1;
    }
    MatchPermutation(map)
}

/// Consumer of the aligned, query-matched samples of one ensemble.
pub trait SampleAccumulator {
    fn observe(&mut self, sample: &SampleTensor) -> Result<()>;
}

/// Running logit-space mean of the samples folded so far.
#[derive(Debug)]
pub struct RunningAggregate {
    count: usize,
    queries: usize,
    c_total: usize,
    dims: (usize, usize),
    mean_class: Vec<f64>,
    mean_mask: Vec<f64>,
    _resident: Resident,
}

impl RunningAggregate {
    /// Starts the mean from the first sample.
    pub fn new(first: &SampleTensor) -> Self {
        Self {
            count: 1,
            queries: first.queries(),
            c_total: first.c_total(),
            dims: first.dims(),
            mean_class: first.class_logits().iter().map(|&v| v as f64).collect(),
            mean_mask: first.mask_logits().iter().map(|&v| v as f64).collect(),
            _resident: Resident::acquire(),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn mean_class_logits(&self) -> &[f64] {
        &self.mean_class
    }

    pub fn mean_mask_logits(&self) -> &[f64] {
        &self.mean_mask
    }

    pub fn mean_mask(&self, query: usize) -> &[f64] {
        let plane = self.dims.0 * self.dims.1;
        &self.mean_mask[query * plane..(query + 1) * plane]
    }

    /// Distances between an incoming sample and the current mean.
    pub fn distances(&self, next: &SampleTensor) -> Result<DistanceMatrix> {
        check_match_shapes(self.queries, self.dims, next)?;
        if next.c_total() != self.c_total {
            return Err(Error::MixedClassCount {
                expected: self.c_total,
                found: next.c_total(),
            });
        }
        Ok(distances_from(
            |q, range, out| out.extend(self.mean_mask(q)[range].iter().map(|&v| sigmoid(v))),
            next,
        ))
    }

    /// Matches `next` to the mean, folds it in and hands the permuted sample to every accumulator.
    pub fn fold_sample(
        &mut self,
        mut next: SampleTensor,
        accumulators: &mut [&mut dyn SampleAccumulator],
    ) -> Result<MatchPermutation> {
        if !next.transform().is_identity() {
            return Err(Error::WrongTransform {
                expected: "identity (aligned sample)",
                found: next.transform().to_string(),
            });
        }
        let d = self.distances(&next)?;
        let perm = greedy_match(&d);
        next.scatter_queries(perm.as_slice());
        self.count += 1;
        let i = self.count as f64;
        for (m, &x) in self.mean_class.iter_mut().zip(next.class_logits()) {
            *m = ((i - 1.0) * *m + x as f64) / i;
        }
        for (m, &x) in self.mean_mask.iter_mut().zip(next.mask_logits()) {
            *m = ((i - 1.0) * *m + x as f64) / i;
        }
        for acc in accumulators.iter_mut() {
            acc.observe(&next)?;
        }
        Ok(perm)
    }

    pub fn view(&self) -> LogitView<'_, f64> {
        LogitView {
            queries: self.queries,
            c_total: self.c_total,
            dims: self.dims,
            class: &self.mean_class,
            mask: &self.mean_mask,
        }
    }

    /// The mean as a 32-bit sample.
    pub fn to_sample(&self) -> SampleTensor {
        SampleTensor::new(
            self.queries,
            self.c_total,
            self.dims,
            self.mean_class.iter().map(|&v| v as f32).collect(),
            self.mean_mask.iter().map(|&v| v as f32).collect(),
            TransformDescriptor::IDENTITY,
        )
        .expect("mean of finite samples is finite")
    }
}

/// Result of aggregating one ensemble.
#[derive(Debug)]
pub struct Aggregated {
    /// The fused sample (the single member itself when Q = 1).
    pub fused: SampleTensor,
    /// Number of samples folded, Q.
    pub samples: usize,
    /// Match applied to each sample after the first.
    pub matches: Vec<MatchPermutation>,
    /// 64-bit running mean (a copy of the single member when Q = 1).
    pub mean: RunningAggregate,
}

/// Folds a stream of aligned samples in order.
pub fn aggregate_samples<I>(samples: I, accumulators: &mut [&mut dyn SampleAccumulator]) -> Result<Aggregated>
where
    I: IntoIterator<Item = Result<SampleTensor>>,
{
    let mut iter = samples.into_iter();
    let first = iter.next().ok_or(Error::EmptyEnsemble)??;
    for acc in accumulators.iter_mut() {
        acc.observe(&first)?;
    }
    let mut agg = RunningAggregate::new(&first);
    // Released before the next member is loaded; a single member is rebuilt
    // from the mean, which holds its logits exactly.
    drop(first);
    let Some(second) = iter.next() else {
        return Ok(Aggregated {
            fused: agg.to_sample(),
            samples: 1,
            matches: Vec::new(),
            mean: agg,
        });
    };
    let mut matches = vec![agg.fold_sample(second?, accumulators)?];
    for next in iter {
        matches.push(agg.fold_sample(next?, accumulators)?);
    }
    let fused = agg.to_sample();
    Ok(Aggregated {
        fused,
        samples: agg.count(),
        matches,
        mean: agg,
    })
}

/// Aggregates an aligned ensemble in producer order.
pub fn aggregate_stream(
    ensemble: &AlignedEnsemble<'_>,
    accumulators: &mut [&mut dyn SampleAccumulator],
) -> Result<Aggregated> {
    aggregate_samples(ensemble.iter(), accumulators)
}
