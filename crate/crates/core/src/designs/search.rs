use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layout::{complete_bibd_spec, BibdSpec, DesignLayout};
use crate::error::{Error, Result};

/// Total number of search nodes before giving up.
pub const SEARCH_BUDGET: u64 = 1_000_000;
const RESTART_NODES: u64 = 50_000;
const ORBIT_RESTART_NODES: u64 = 5_000;
const MAX_PROFILES: usize = 2_000;
const PROFILE_NODES: u64 = 50_000;

/// Finds a layout for `spec` by randomized backtracking.
///
/// The first phase looks for base blocks whose translates under a cyclic
/// group `Z_m` form the design. Treatments are split into `c` residue classes
/// of size `m` plus at most one fixed point; when `k = m`, whole classes may
/// also serve as blocks. For each group the admissible per-class block sizes
/// are enumerated first, which pins down how many differences every base
/// block contributes, and residues are then searched within those sizes.
///
/// The second phase fills the incidence matrix one treatment row at a time,
/// with exactly `r` ones per row and `lambda` overlaps with every earlier row.
/// Blocks whose columns are still identical are treated as one class.
///
/// Both phases try candidates in seeded random order and restart
/// periodically; the node budget is shared.
pub fn generate_layout(spec: &BibdSpec, seed: u64) -> Result<DesignLayout> {
    let spec = complete_bibd_spec(spec.t, spec.k, spec.r).and_then(|s| {
        if s == *spec {
            Ok(s)
        } else {
            Err(Error::Infeasible(format!("inconsistent parameters {spec:?}")))
        }
    })?;
    if spec.is_complete() {
        let full: Vec<usize> = (0..spec.t).collect();
        return DesignLayout::new(spec, vec![full; spec.n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut budget = Budget { used: 0, restarts: 0 };

    // collect every admissible (group, profile), then restart round-robin
    let mut work = Vec::new();
    for group in Group::candidates(&spec) {
        if budget.used >= SEARCH_BUDGET / 4 {
            break;
        }
        let mut profiles = group.profiles(&spec, &mut budget.used);
        profiles.shuffle(&mut rng);
        work.extend(profiles.into_iter().map(|p| (group, p)));
    }
    'orbit: while !work.is_empty() {
        for (group, profile) in &work {
            if budget.used >= SEARCH_BUDGET / 2 {
                break 'orbit;
            }
            let mut search = OrbitSearch::new(spec, *group, profile.clone(), ORBIT_RESTART_NODES);
            let found = search.run(&mut rng);
            budget.used += search.nodes;
            if found {
                return finish(spec, search.develop(), &mut rng);
            }
            budget.restarts += 1;
        }
    }

    while budget.used < SEARCH_BUDGET {
        let limit = RESTART_NODES.min(SEARCH_BUDGET - budget.used);
        let mut search = RowSearch::new(spec, limit);
        let found = search.row(0, &mut rng) == Some(true);
        budget.used += search.nodes;
        if found {
            let blocks = (0..spec.n)
                .map(|c| (0..spec.t).filter(|&i| search.rows[i][c]).collect())
                .collect();
            return finish(spec, blocks, &mut rng);
        }
        budget.restarts += 1;
    }
    Err(Error::SearchExhausted {
        budget: SEARCH_BUDGET,
        restarts: budget.restarts,
    })
}

struct Budget {
    used: u64,
    restarts: u32,
}

/// Relabels treatments at random and puts the blocks in canonical order.
fn finish(spec: BibdSpec, blocks: Vec<Vec<usize>>, rng: &mut ChaCha8Rng) -> Result<DesignLayout> {
    let mut labels: Vec<usize> = (0..spec.t).collect();
    labels.shuffle(rng);
    let mut blocks: Vec<Vec<usize>> = blocks
        .into_iter()
        .map(|b| {
            let mut b: Vec<usize> = b.into_iter().map(|i| labels[i]).collect();
            b.sort_unstable();
            b
        })
        .collect();
    blocks.sort();
    DesignLayout::new(spec, blocks)
}

/// `Z_m` acting on `copies` residue classes plus `fixed` (0 or 1) points.
/// When `k = m`, the first `class_blocks` classes are also blocks.
#[derive(Debug, Clone, Copy)]
struct Group {
    m: usize,
    copies: usize,
    fixed: usize,
    class_blocks: usize,
}

impl Group {
    fn candidates(spec: &BibdSpec) -> Vec<Group> {
        let mut out = Vec::new();
        for m in 3..=spec.t {
            for fixed in 0..=1 {
                if spec.t < m + fixed || (spec.t - fixed) % m != 0 || (fixed == 1 && spec.r % m != 0) {
                    continue;
                }
                let copies = (spec.t - fixed) / m;
                let most = if spec.k == m { copies } else { 0 };
                for class_blocks in 0..=most {
                    if spec.n >= class_blocks && (spec.n - class_blocks) % m == 0 {
                        out.push(Group {
                            m,
                            copies,
                            fixed,
                            class_blocks,
                        });
                    }
                }
            }
        }
        out.sort_by_key(|g| (g.n_base(spec), g.copies));
        out
    }

    fn n_base(&self, spec: &BibdSpec) -> usize {
        (spec.n - self.class_blocks) / self.m
    }

    /// Base blocks through the fixed point.
    fn n_fixed_base(&self, spec: &BibdSpec) -> usize {
        self.fixed * spec.r / self.m
    }

    /// Multisets of per-class block sizes that produce every difference
    /// exactly `lambda` times.
    fn profiles(&self, spec: &BibdSpec, used: &mut u64) -> Vec<Vec<Vec<usize>>> {
        let c = self.copies;
        let lambda = spec.lambda;
        let reps: Vec<usize> = (0..c).map(|i| spec.r - usize::from(i < self.class_blocks)).collect();
        let pure: Vec<usize> = (0..c)
            .map(|i| (lambda - usize::from(i < self.class_blocks)) * (self.m - 1))
            .collect();
        let state = ProfileState {
            reps: vec![0; c],
            pure: vec![0; c],
            mixed: vec![0; c * c],
            fixed: vec![0; c],
        };
        let mut out = Vec::new();
        let mut current = Vec::new();
        let targets = ProfileTargets {
            reps,
            pure,
            mixed: lambda * self.m,
            fixed: lambda,
        };
        let mut nodes = 0;
        self.profile_dfs(spec, &targets, state, &mut current, &mut out, &mut nodes);
        *used += nodes;
        out
    }

    fn profile_dfs(
        &self,
        spec: &BibdSpec,
        targets: &ProfileTargets,
        state: ProfileState,
        current: &mut Vec<Vec<usize>>,
        out: &mut Vec<Vec<Vec<usize>>>,
        nodes: &mut u64,
    ) {
        if out.len() >= MAX_PROFILES || *nodes >= PROFILE_NODES {
            return;
        }
        let c = self.copies;
        let idx = current.len();
        if idx == self.n_base(spec) {
            let ok = state.reps == targets.reps
                && state.pure == targets.pure
                && (0..c).all(|a| (a + 1..c).all(|b| state.mixed[a * c + b] == targets.mixed))
                && (self.fixed == 0 || state.fixed.iter().all(|&f| f == targets.fixed));
            if ok {
                out.push(current.clone());
            }
            return;
        }
        let through_fixed = idx < self.n_fixed_base(spec);
        let size = spec.k - usize::from(through_fixed);
        // sizes are non-increasing within the fixed and free groups
        let prev = match idx {
            0 => None,
            i if i == self.n_fixed_base(spec) => None,
            i => Some(current[i - 1].clone()),
        };
        let mut parts = vec![0; c];
        self.compositions(size, 0, &mut parts, &mut |comp: &[usize]| {
            *nodes += 1;
            if *nodes >= PROFILE_NODES {
                return;
            }
            if let Some(p) = &prev {
                if comp > p.as_slice() {
                    return;
                }
            }
            let mut next = state.clone();
            for a in 0..c {
                next.reps[a] += comp[a];
                next.pure[a] += comp[a] * comp[a].saturating_sub(1);
                if through_fixed {
                    next.fixed[a] += comp[a];
                }
                for b in a + 1..c {
                    next.mixed[a * c + b] += comp[a] * comp[b];
                }
            }
            let within = (0..c).all(|a| {
                next.reps[a] <= targets.reps[a]
                    && next.pure[a] <= targets.pure[a]
                    && next.fixed[a] <= targets.fixed
                    && (a + 1..c).all(|b| next.mixed[a * c + b] <= targets.mixed)
            });
            if within {
                current.push(comp.to_vec());
                self.profile_dfs(spec, targets, next, current, out, nodes);
                current.pop();
            }
        });
    }

    fn compositions(&self, left: usize, at: usize, parts: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        let c = self.copies;
        if at == c - 1 {
            if left <= self.m {
                parts[at] = left;
                f(parts);
            }
            return;
        }
        for v in (0..=left.min(self.m)).rev() {
            parts[at] = v;
            self.compositions(left - v, at + 1, parts, f);
        }
    }
}

struct ProfileTargets {
    reps: Vec<usize>,
    pure: Vec<usize>,
    mixed: usize,
    fixed: usize,
}

#[derive(Clone)]
struct ProfileState {
    reps: Vec<usize>,
    pure: Vec<usize>,
    mixed: Vec<usize>,
    fixed: Vec<usize>,
}

/// Residue search for base blocks with a fixed size profile, filling one
/// class at a time across all base blocks.
struct OrbitSearch {
    spec: BibdSpec,
    g: Group,
    profile: Vec<Vec<usize>>,
    /// Block counts for each (class, class, residue difference).
    diffs: Vec<usize>,
    /// Chosen residues by base block and class.
    sets: Vec<Vec<Vec<usize>>>,
    nodes: u64,
    limit: u64,
}

impl OrbitSearch {
    fn new(spec: BibdSpec, g: Group, profile: Vec<Vec<usize>>, limit: u64) -> Self {
        let mut diffs = vec![0; g.copies * g.copies * g.m];
        for c in 0..g.class_blocks {
            for d in 1..g.m {
                diffs[(c * g.copies + c) * g.m + d] = 1;
            }
        }
        let sets = vec![vec![Vec::new(); g.copies]; profile.len()];
        Self {
            spec,
            g,
            profile,
            diffs,
            sets,
            nodes: 0,
            limit,
        }
    }

    fn slot(&self, ca: usize, ra: usize, cb: usize, rb: usize) -> usize {
        let m = self.g.m;
        (ca * self.g.copies + cb) * m + (rb + m - ra) % m
    }

    /// Pairs residue `x` of class `c` with everything already in block `b`;
    /// returns whether all counts stay within `lambda`. `delta = -1` undoes
    /// the pairing.
    fn pair(&mut self, b: usize, c: usize, x: usize, delta: isize) -> bool {
        let mut ok = true;
        for cc in 0..=c {
            for i in 0..self.sets[b][cc].len() {
                let y = self.sets[b][cc][i];
                let (s1, s2) = (self.slot(c, x, cc, y), self.slot(cc, y, c, x));
                for s in [s1, s2] {
                    self.diffs[s] = self.diffs[s].wrapping_add_signed(delta);
                    ok &= self.diffs[s] <= self.spec.lambda;
                }
            }
        }
        ok
    }

    fn step(&mut self, s: usize, rng: &mut ChaCha8Rng) -> Option<bool> {
        let nb = self.profile.len();
        if s == nb * self.g.copies {
            return Some(true);
        }
        let (c, b) = (s / nb, s % nb);
        self.place(s, c, b, rng)
    }

    fn place(&mut self, s: usize, c: usize, b: usize, rng: &mut ChaCha8Rng) -> Option<bool> {
        self.nodes += 1;
        if self.nodes > self.limit {
            return None;
        }
        let m = self.g.m;
        let have = self.sets[b][c].len();
        if have == self.profile[b][c] {
            return self.step(s + 1, rng);
        }
        let first_class = (0..self.g.copies).find(|&cc| self.profile[b][cc] > 0) == Some(c);
        let mut cands: Vec<usize> = match self.sets[b][c].last() {
            // translate each base block so its first point has residue 0
            None if first_class => vec![0],
            None => (0..m).collect(),
            Some(&last) => (last + 1..m).collect(),
        };
        // leave room for the residues still to come
        let need = self.profile[b][c] - have;
        cands.retain(|&x| m - x >= need);
        cands.shuffle(rng);
        for x in cands {
            let ok = self.pair(b, c, x, 1);
            let res = if ok {
                self.sets[b][c].push(x);
                let res = self.place(s, c, b, rng);
                if res != Some(true) {
                    self.sets[b][c].pop();
                }
                res
            } else {
                Some(false)
            };
            if res == Some(true) {
                return res;
            }
            self.pair(b, c, x, -1);
            if res.is_none() {
                return None;
            }
        }
        Some(false)
    }

    fn run(&mut self, rng: &mut ChaCha8Rng) -> bool {
        self.step(0, rng) == Some(true)
    }

    /// All blocks: whole classes, then the translates of each base block.
    fn develop(&self) -> Vec<Vec<usize>> {
        let m = self.g.m;
        let fixed_point = m * self.g.copies;
        let n_fixed = self.g.n_fixed_base(&self.spec);
        let mut blocks: Vec<Vec<usize>> = (0..self.g.class_blocks)
            .map(|c| (c * m..(c + 1) * m).collect())
            .collect();
        for (i, sets) in self.sets.iter().enumerate() {
            for shift in 0..m {
                let mut blk: Vec<usize> = sets
                    .iter()
                    .enumerate()
                    .flat_map(|(c, res)| res.iter().map(move |&x| c * m + (x + shift) % m))
                    .collect();
                if i < n_fixed {
                    blk.push(fixed_point);
                }
                blocks.push(blk);
            }
        }
        blocks
    }
}

/// Incidence-matrix search, one treatment row at a time.
struct RowSearch {
    spec: BibdSpec,
    rows: Vec<Vec<bool>>,
    colsum: Vec<usize>,
    /// Contiguous column ranges that are identical in all rows so far.
    classes: Vec<(usize, usize)>,
    nodes: u64,
    limit: u64,
}

impl RowSearch {
    fn new(spec: BibdSpec, limit: u64) -> Self {
        Self {
            spec,
            rows: Vec::with_capacity(spec.t),
            colsum: vec![0; spec.n],
            classes: vec![(0, spec.n)],
            nodes: 0,
            limit,
        }
    }

    /// `Some(found)`, or `None` once the node limit is hit.
    fn row(&mut self, i: usize, rng: &mut ChaCha8Rng) -> Option<bool> {
        if i == self.spec.t {
            return Some(self.colsum.iter().all(|&c| c == self.spec.k));
        }
        let mut counts = vec![0usize; self.classes.len()];
        let mut overlap = vec![0usize; i];
        self.fill(i, 0, 0, &mut counts, &mut overlap, rng)
    }

    fn fill(
        &mut self,
        i: usize,
        c: usize,
        ones: usize,
        counts: &mut [usize],
        overlap: &mut [usize],
        rng: &mut ChaCha8Rng,
    ) -> Option<bool> {
        self.nodes += 1;
        if self.nodes > self.limit {
            return None;
        }
        let (r, k, lambda, t) = (self.spec.r, self.spec.k, self.spec.lambda, self.spec.t);
        if c == self.classes.len() {
            if ones != r || overlap.iter().any(|&o| o != lambda) {
                return Some(false);
            }
            return self.commit(i, counts, rng);
        }
        let (start, len) = self.classes[c];
        let sum = self.colsum[start];
        let rows_after = t - i - 1;
        // columns left at zero must still reach k from the remaining rows
        let min = if k - sum > rows_after { len } else { 0 };
        let max = if sum < k { len.min(r - ones) } else { 0 };
        if min > max {
            return Some(false);
        }
        let mut values: Vec<usize> = (min..=max).collect();
        values.shuffle(rng);
        for x in values {
            let mut ok = true;
            for (j, o) in overlap.iter_mut().enumerate() {
                if self.rows[j][start] {
                    *o += x;
                    ok &= *o <= lambda;
                }
            }
            if ok && self.reachable(c + 1, ones + x, overlap) {
                counts[c] = x;
                let res = self.fill(i, c + 1, ones + x, counts, overlap, rng);
                if res != Some(false) {
                    return res;
                }
            }
            for (j, o) in overlap.iter_mut().enumerate() {
                if self.rows[j][start] {
                    *o -= x;
                }
            }
        }
        Some(false)
    }

    /// Classes from `c` on can still supply the missing ones and overlaps.
    fn reachable(&self, c: usize, ones: usize, overlap: &[usize]) -> bool {
        let k = self.spec.k;
        let cap = |&(start, len): &(usize, usize)| if self.colsum[start] < k { len } else { 0 };
        let rest: usize = self.classes[c..].iter().map(cap).sum();
        if ones + rest < self.spec.r {
            return false;
        }
        overlap.iter().enumerate().all(|(j, &o)| {
            let avail: usize = self.classes[c..].iter().filter(|cl| self.rows[j][cl.0]).map(cap).sum();
            o + avail >= self.spec.lambda
        })
    }

    fn commit(&mut self, i: usize, counts: &[usize], rng: &mut ChaCha8Rng) -> Option<bool> {
        let mut row = vec![false; self.spec.n];
        let mut refined = Vec::with_capacity(self.classes.len() * 2);
        for (&(start, len), &x) in self.classes.iter().zip(counts) {
            for cell in &mut row[start..start + x] {
                *cell = true;
            }
            if x > 0 {
                refined.push((start, x));
            }
            if x < len {
                refined.push((start + x, len - x));
            }
        }
        for (s, &b) in self.colsum.iter_mut().zip(&row) {
            *s += b as usize;
        }
        let saved = std::mem::replace(&mut self.classes, refined);
        self.rows.push(row);
        let res = self.row(i + 1, rng);
        if res != Some(true) {
            let row = self.rows.pop().unwrap();
            for (s, &b) in self.colsum.iter_mut().zip(&row) {
                *s -= b as usize;
            }
            self.classes = saved;
        }
        res
    }
}
