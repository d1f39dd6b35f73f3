//! Synthetic template/search scenarios with a planted correspondence, and
//! localization of the plant from the attention scores.

use crate::attention::{
    default_registry, multi_head_attention_traced, HeadTrace, KernelRegistry, MultiHeadOutput,
    MultiScaleConfig, ProjectionSet,
};
use crate::error::{contract, Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::FeatureMap;

/// Placement attempts per distractor before giving up.
const PLACEMENT_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub channels: usize,
    pub template: (usize, usize),
    pub search: (usize, usize),
    /// Top-left pixel `(y, x)` of the template copy inside the search map.
    pub plant: (usize, usize),
    pub noise_sigma: f64,
    pub distractors: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 1,
            channels: 64,
            template: (8, 8),
            search: (24, 24),
            plant: (4, 6),
            noise_sigma: 0.0,
            distractors: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let (hz, wz) = self.template;
        let (hs, ws) = self.search;
        if self.channels == 0 || hz == 0 || wz == 0 || hs == 0 || ws == 0 {
            return Err(Error::Config("scenario dimensions must be positive".into()));
        }
        let (py, px) = self.plant;
        if py + hz > hs || px + wz > ws {
            return Err(Error::Config(format!(
                "plant ({py}, {px}) of a {hz}x{wz} template does not fit a {hs}x{ws} search map"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigma must be finite and nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub plant: (usize, usize),
    /// Top-left pixels of the decoy patches.
    pub distractors: Vec<(usize, usize)>,
}

/// Builds the template and search maps for `s`.
///
/// Draw order from the seed: template values, then the noise field (only when
/// `noise_sigma > 0`), then for each distractor its channel permutation and
/// position. Noise is added to every search pixel, plant and decoys included.
pub fn synth_scenario(s: &Scenario) -> Result<(FeatureMap, FeatureMap, GroundTruth)> {
    s.validate()?;
    let d = s.channels;
    let (hz, wz) = s.template;
    let (hs, ws) = s.search;
    let mut rng = SplitMix64::new(s.seed);

    let f_z = FeatureMap::from_fn(d, hz, wz, |_, _, _| rng.normal())?;
    let noise: Vec<f64> = if s.noise_sigma > 0.0 {
        (0..d * hs * ws)
            .map(|_| s.noise_sigma * rng.normal())
            .collect()
    } else {
        Vec::new()
    };

    let mut placed = vec![s.plant];
    let mut decoys = Vec::with_capacity(s.distractors);
    if s.distractors > 0 && d < 2 {
        return Err(Error::Config(
            "distractors need at least two channels to permute".into(),
        ));
    }
    for _ in 0..s.distractors {
        let mut perm: Vec<usize> = (0..d).collect();
        while perm.iter().enumerate().all(|(i, &p)| i == p) {
            rng.shuffle(&mut perm);
        }
        let overlaps = |a: (usize, usize), b: (usize, usize)| {
            a.0 < b.0 + hz && b.0 < a.0 + hz && a.1 < b.1 + wz && b.1 < a.1 + wz
        };
        let spot = (0..PLACEMENT_TRIES)
            .map(|_| (rng.below(hs - hz + 1), rng.below(ws - wz + 1)))
            .find(|&p| placed.iter().all(|&q| !overlaps(p, q)))
            .ok_or_else(|| {
                Error::Config(format!(
                    "no room for {} non-overlapping distractors",
                    s.distractors
                ))
            })?;
        placed.push(spot);
        decoys.push((spot, perm));
    }

    let mut f_s = FeatureMap::zeros(d, hs, ws);
    let mut paste = |at: (usize, usize), channel_of: &dyn Fn(usize) -> usize| {
        for c in 0..d {
            for y in 0..hz {
                for x in 0..wz {
                    f_s.set(c, at.0 + y, at.1 + x, f_z.at(channel_of(c), y, x));
                }
            }
        }
    };
    paste(s.plant, &|c| c);
    for (at, perm) in &decoys {
        paste(*at, &|c| perm[c]);
    }
    let f_s = if noise.is_empty() {
        f_s
    } else {
        let data = f_s.data().iter().zip(&noise).map(|(a, b)| a + b).collect();
        FeatureMap::new(d, hs, ws, data)?
    };
    let truth = GroundTruth {
        plant: s.plant,
        distractors: decoys.into_iter().map(|(at, _)| at).collect(),
    };
    Ok((f_z, f_s, truth))
}

/// Row-major 2-D grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.cols + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(y, x)` of the first maximal cell.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best / self.cols, best % self.cols)
    }
}

/// One template query window's placement vote from one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vote {
    pub head: usize,
    /// Implied plant position `(y, x)`.
    pub offset: (usize, usize),
    /// Gap between the winning and the runner-up content score.
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    pub predicted: (usize, usize),
    /// Mean of the per-head heat maps.
    pub score_map: Grid,
    pub per_head: Vec<Grid>,
    pub votes: Vec<Vote>,
}

/// Returns the placement votes of one head.
///
/// For each template query window the best `(search key, shift class)` pair by
/// content score (logit minus the class bias) is taken. A nonzero class
/// component `c` along an axis is ambiguous between shifts `c` and `c − r`,
/// i.e. between the query's content continuing into the key before or after
/// the winner on that axis; the neighbour that scores higher at the same class
/// decides. Votes that place the template outside the search map are dropped.
pub fn head_votes(trace: &HeadTrace) -> Result<Vec<Vote>> {
    let nz = trace.n_template();
    let ns = trace.n_search();
    if ns == 0 {
        return contract("localization needs search-side keys");
    }
    let res = &trace.result;
    let r = trace.window_size;
    let classes = r * r;
    let (rows, cols) = trace.search_grid;
    let (hs, ws) = (rows * r, cols * r);
    let (hz, wz) = (trace.template_grid.0 * r, trace.template_grid.1 * r);
    let t = trace.translation as i64;

    let mut votes = Vec::with_capacity(nz);
    for q in 0..nz {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        let mut second = f64::NEG_INFINITY;
        for k in 0..ns {
            for c in 0..classes {
                let s = res.score(q, nz + k, c);
                if s > best.0 {
                    second = best.0;
                    best = (s, k, c);
                } else if s > second {
                    second = s;
                }
            }
        }
        let (_, k, c) = best;
        let (kr, kc) = (k / cols, k % cols);
        let key = |row: usize, col: usize| nz + row * cols + col;
        let (cy, cx) = (c / r, c % r);

        let y = if cy == 0 {
            (kr * r) as i64
        } else {
            let above = res.score(q, key((kr + rows - 1) % rows, kc), c);
            let below = res.score(q, key((kr + 1) % rows, kc), c);
            (kr * r) as i64 - cy as i64 + if above >= below { 0 } else { r as i64 }
        };
        let x = if cx == 0 {
            (kc * r) as i64
        } else {
            let left = res.score(q, key(kr, (kc + cols - 1) % cols), c);
            let right = res.score(q, key(kr, (kc + 1) % cols), c);
            (kc * r) as i64 - cx as i64 + if left >= right { 0 } else { r as i64 }
        };

        let (qy, qx) = trace.template_origin(q);
        let py = (y - t - qy as i64).rem_euclid(hs as i64) as usize;
        let px = (x - t - qx as i64).rem_euclid(ws as i64) as usize;
        if py + hz <= hs && px + wz <= ws {
            let margin = if second.is_finite() {
                best.0 - second
            } else {
                0.0
            };
            votes.push(Vote {
                head: trace.head,
                offset: (py, px),
                margin,
            });
        }
    }
    Ok(votes)
}

/// Smallest value whose cumulative weight reaches half the total.
fn weighted_median(mut items: Vec<(usize, f64)>) -> usize {
    items.sort_by_key(|&(v, _)| v);
    let total: f64 = items.iter().map(|&(_, w)| w).sum();
    let mut acc = 0.0;
    for &(v, w) in &items {
        acc += w;
        if acc >= total / 2.0 {
            return v;
        }
    }
    items.last().map(|&(v, _)| v).unwrap_or(0)
}

/// Consensus of all heads' votes: per-axis weighted median, with each head's
/// margins normalized to sum to one so every head carries the same weight.
pub fn localize(traces: &[HeadTrace]) -> Result<(usize, usize)> {
    let mut weighted = Vec::new();
    for trace in traces {
        let votes = head_votes(trace)?;
        let total: f64 = votes.iter().map(|v| v.margin).sum();
        for v in &votes {
            let w = if total > 0.0 {
                v.margin / total
            } else {
                1.0 / votes.len() as f64
            };
            weighted.push((v.offset, w));
        }
    }
    if weighted.is_empty() {
        return contract("no head produced a placement inside the search map");
    }
    let ys = weighted.iter().map(|&((y, _), w)| (y, w)).collect();
    let xs = weighted.iter().map(|&((_, x), w)| (x, w)).collect();
    Ok((weighted_median(ys), weighted_median(xs)))
}

/// Attention mass each search pixel receives from the template queries of
/// `traces[head]`, in search-map coordinates, scaled so the maximum is 1.
///
/// Every pixel of a key window receives that window's total weight over all
/// shift classes.
pub fn heatmap(traces: &[HeadTrace], head: usize) -> Result<Grid> {
    let Some(trace) = traces.get(head) else {
        return contract(format!("head {head} out of range ({} heads)", traces.len()));
    };
    let nz = trace.n_template();
    let ns = trace.n_search();
    if ns == 0 {
        return contract("heat map needs search-side keys");
    }
    let r = trace.window_size;
    let classes = r * r;
    let res = &trace.result;
    let mut mass = vec![0.0; ns];
    for q in 0..nz {
        let row = res.weights(q);
        for (k, m) in mass.iter_mut().enumerate() {
            *m += row[(nz + k) * classes..(nz + k + 1) * classes]
                .iter()
                .sum::<f64>();
        }
    }
    let (rows, cols) = trace.search_grid;
    let (hs, ws) = (rows * r, cols * r);
    let t = trace.translation;
    let mut grid = Grid::zeros(hs, ws);
    for (k, m) in mass.iter().enumerate() {
        let (oy, ox) = trace.search_origin(k);
        for v in 0..r {
            for u in 0..r {
                // translated pixel (y, x) shows original pixel (y − t, x − t)
                let y = (oy + v + hs - t % hs) % hs;
                let x = (ox + u + ws - t % ws) % ws;
                grid.data[y * ws + x] = *m;
            }
        }
    }
    let max = grid.max();
    if max > 0.0 {
        grid.data.iter_mut().for_each(|v| *v /= max);
    }
    Ok(grid)
}

/// Localization and heat maps from an already computed multi-head pass.
pub fn inspect(out: &MultiHeadOutput) -> Result<MatchResult> {
    let predicted = localize(&out.heads)?;
    let per_head = (0..out.heads.len())
        .map(|h| heatmap(&out.heads, h))
        .collect::<Result<Vec<_>>>()?;
    let (rows, cols) = (per_head[0].rows, per_head[0].cols);
    let mut score_map = Grid::zeros(rows, cols);
    for g in &per_head {
        for (acc, v) in score_map.data.iter_mut().zip(&g.data) {
            *acc += v / per_head.len() as f64;
        }
    }
    let mut votes = Vec::new();
    for trace in &out.heads {
        votes.extend(head_votes(trace)?);
    }
    Ok(MatchResult {
        predicted,
        score_map,
        per_head,
        votes,
    })
}

/// Synthesizes `s`, runs identity-projection attention at `cfg.level` and
/// localizes the plant.
pub fn run_match(s: &Scenario, cfg: &MultiScaleConfig) -> Result<MatchResult> {
    run_match_with(s, cfg, default_registry())
}

pub fn run_match_with(
    s: &Scenario,
    cfg: &MultiScaleConfig,
    registry: &KernelRegistry,
) -> Result<MatchResult> {
    let (f_z, f_s, _) = synth_scenario(s)?;
    let out = multi_head_attention_traced(&f_z, &f_s, cfg, &ProjectionSet::identity(), registry)?;
    inspect(&out)
}
