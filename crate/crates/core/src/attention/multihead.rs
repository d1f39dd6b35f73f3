//! Multi-scale, multi-head composition over a template/search pair.

use rayon::prelude::*;

use super::{default_registry, AttentionResult, HeadConfig, KernelRegistry, ProjectionSet};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;
use crate::window::{partition, reassemble, translate, Window, WindowGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleConfig {
    pub heads: Vec<HeadConfig>,
    /// Registered kernel name.
    pub level: String,
}

impl MultiScaleConfig {
    pub const DEFAULT_WINDOWS: [usize; 8] = [1, 2, 4, 8, 1, 2, 4, 8];
    pub const DEFAULT_LEVEL: &'static str = "rmq_peri_prog";

    /// Eight heads with windows `1, 2, 4, 8, 1, 2, 4, 8`; the last four
    /// translate the search map.
    pub fn default_for(channels: usize) -> Result<Self> {
        Self::from_windows(channels, &Self::DEFAULT_WINDOWS, true)
    }

    /// Equal channel split over `windows.len()` heads; the second half of the
    /// heads translate the search map.
    pub fn from_windows(channels: usize, windows: &[usize], use_mask: bool) -> Result<Self> {
        let n = windows.len();
        if n == 0 {
            return Err(Error::Config("at least one head is required".into()));
        }
        if channels == 0 || !channels.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split evenly over {n} heads"
            )));
        }
        let heads = windows
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                HeadConfig::new(r, channels / n)
                    .with_mask(use_mask)
                    .with_translation(n >= 2 && i >= n / 2)
            })
            .collect();
        Ok(Self {
            heads,
            level: Self::DEFAULT_LEVEL.to_string(),
        })
    }

    pub fn with_level(mut self, level: &str) -> Self {
        self.level = level.to_string();
        self
    }

    pub fn with_mask(mut self, on: bool) -> Self {
        for h in &mut self.heads {
            h.use_mask = on;
        }
        self
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn total_channels(&self) -> usize {
        self.heads.iter().map(|h| h.channels).sum()
    }

    pub fn validate(
        &self,
        channels: usize,
        template: (usize, usize),
        search: (usize, usize),
    ) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("at least one head is required".into()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            let r = h.window_size;
            let reason = if r == 0 || h.channels == 0 {
                Some("window size and channels must be positive".to_string())
            } else if [template.0, template.1, search.0, search.1]
                .iter()
                .any(|s| s % r != 0)
            {
                Some(format!(
                    "window {r} does not divide template {}x{} and search {}x{}",
                    template.0, template.1, search.0, search.1
                ))
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(Error::Head { head: i, reason });
            }
        }
        if self.total_channels() != channels {
            return Err(Error::Config(format!(
                "heads use {} channels, maps have {channels}",
                self.total_channels()
            )));
        }
        Ok(())
    }
}

/// One head's attention together with the geometry needed to read it back in
/// pixel terms.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub head: usize,
    pub window_size: usize,
    /// Displacement applied to the search map before partitioning.
    pub translation: usize,
    pub template_grid: (usize, usize),
    pub search_grid: (usize, usize),
    pub result: AttentionResult,
}

impl HeadTrace {
    /// Query/key indices `0..n_template()` are template windows; the rest are
    /// search windows.
    pub fn n_template(&self) -> usize {
        self.template_grid.0 * self.template_grid.1
    }

    pub fn n_search(&self) -> usize {
        self.search_grid.0 * self.search_grid.1
    }

    pub fn template_origin(&self, index: usize) -> (usize, usize) {
        let r = self.window_size;
        let cols = self.template_grid.1;
        ((index / cols) * r, (index % cols) * r)
    }

    /// Origin of search window `index` (0-based within the search part) in the
    /// translated frame.
    pub fn search_origin(&self, index: usize) -> (usize, usize) {
        let r = self.window_size;
        let cols = self.search_grid.1;
        ((index / cols) * r, (index % cols) * r)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadOutput {
    pub fused_z: FeatureMap,
    pub fused_s: FeatureMap,
    pub heads: Vec<HeadTrace>,
}

pub fn multi_head_attention(
    f_z: &FeatureMap,
    f_s: &FeatureMap,
    cfg: &MultiScaleConfig,
    proj: &ProjectionSet,
) -> Result<(FeatureMap, FeatureMap)> {
    let out = multi_head_attention_traced(f_z, f_s, cfg, proj, default_registry())?;
    Ok((out.fused_z, out.fused_s))
}

pub fn multi_head_attention_traced(
    f_z: &FeatureMap,
    f_s: &FeatureMap,
    cfg: &MultiScaleConfig,
    proj: &ProjectionSet,
    registry: &KernelRegistry,
) -> Result<MultiHeadOutput> {
    if f_z.channels() != f_s.channels() {
        return Err(Error::Config(format!(
            "template has {} channels, search has {}",
            f_z.channels(),
            f_s.channels()
        )));
    }
    cfg.validate(
        f_z.channels(),
        (f_z.height(), f_z.width()),
        (f_s.height(), f_s.width()),
    )?;
    proj.validate(cfg)?;
    let kernel = registry.get(&cfg.level)?;

    let offsets: Vec<usize> = cfg
        .heads
        .iter()
        .scan(0, |acc, h| {
            let start = *acc;
            *acc += h.channels;
            Some(start)
        })
        .collect();

    let per_head: Vec<(FeatureMap, FeatureMap, HeadTrace)> = cfg
        .heads
        .par_iter()
        .enumerate()
        .map(|(i, h)| -> Result<_> {
            let range = offsets[i]..offsets[i] + h.channels;
            let (qz, kz, vz) = proj.project(i, &f_z.slice_channels(range.clone())?)?;
            let (qs, ks, vs) = proj.project(i, &f_s.slice_channels(range)?)?;
            let t = h.translation() as i64;
            let shift = |m: FeatureMap| if t == 0 { m } else { translate(&m, t, t) };
            let (qs, ks, vs) = (shift(qs), shift(ks), shift(vs));

            let r = h.window_size;
            let grids = [&qz, &kz, &vz, &qs, &ks, &vs].map(|m| partition(m, r));
            let [gqz, gkz, gvz, gqs, gks, gvs] = grids;
            let (gqz, gkz, gvz, gqs, gks, gvs) = (gqz?, gkz?, gvz?, gqs?, gks?, gvs?);

            let queries: Vec<Window> = gqz.windows.iter().chain(&gqs.windows).cloned().collect();
            let kv: Vec<(Window, Window)> = gkz
                .windows
                .iter()
                .chain(&gks.windows)
                .cloned()
                .zip(gvz.windows.iter().chain(&gvs.windows).cloned())
                .collect();

            let result = kernel.attend(&queries, &kv, h)?;
            let nz = gqz.len();
            let fused = result.fused();
            let out_z = reassemble(&WindowGrid {
                windows: fused[..nz].to_vec(),
                ..gqz.clone()
            })?;
            let out_s = reassemble(&WindowGrid {
                windows: fused[nz..].to_vec(),
                ..gqs.clone()
            })?;
            let out_s = if t == 0 {
                out_s
            } else {
                translate(&out_s, -t, -t)
            };
            let trace = HeadTrace {
                head: i,
                window_size: r,
                translation: t as usize,
                template_grid: (gqz.rows, gqz.cols),
                search_grid: (gqs.rows, gqs.cols),
                result,
            };
            Ok((out_z, out_s, trace))
        })
        .collect::<Result<_>>()?;

    let mut zs = Vec::with_capacity(per_head.len());
    let mut ss = Vec::with_capacity(per_head.len());
    let mut heads = Vec::with_capacity(per_head.len());
    for (z, s, trace) in per_head {
        zs.push(z);
        ss.push(s);
        heads.push(trace);
    }
    Ok(MultiHeadOutput {
        fused_z: proj.apply_output(FeatureMap::concat_channels(&zs)?)?,
        fused_s: proj.apply_output(FeatureMap::concat_channels(&ss)?)?,
        heads,
    })
}

/// Applies one attention layer per projection set, feeding each layer's fused
/// maps into the next.
pub fn stacked_attention(
    f_z: &FeatureMap,
    f_s: &FeatureMap,
    cfg: &MultiScaleConfig,
    layers: &[ProjectionSet],
) -> Result<(FeatureMap, FeatureMap)> {
    let mut z = f_z.clone();
    let mut s = f_s.clone();
    for proj in layers {
        (z, s) = multi_head_attention(&z, &s, cfg, proj)?;
    }
    Ok((z, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::HeadProjection;
    use crate::rng::SplitMix64;

    fn random_map(rng: &mut SplitMix64, d: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(d, h, w, |_, _, _| rng.uniform(-1.0, 1.0)).unwrap()
    }

    #[test]
    fn default_config_shape() {
        let cfg = MultiScaleConfig::default_for(64).unwrap();
        assert_eq!(cfg.n_heads(), 8);
        let windows: Vec<usize> = cfg.heads.iter().map(|h| h.window_size).collect();
        assert_eq!(windows, MultiScaleConfig::DEFAULT_WINDOWS);
        let flags: Vec<bool> = cfg.heads.iter().map(|h| h.translate_search).collect();
        assert_eq!(flags, [false, false, false, false, true, true, true, true]);
        assert!(cfg.heads.iter().all(|h| h.channels == 8 && h.use_mask));
        assert!(MultiScaleConfig::default_for(12).is_err());
    }

    #[test]
    fn default_output_shapes() {
        let mut rng = SplitMix64::new(1);
        let f_z = random_map(&mut rng, 64, 8, 8);
        let f_s = random_map(&mut rng, 64, 24, 24);
        let cfg = MultiScaleConfig::default_for(64).unwrap();
        let (z, s) = multi_head_attention(&f_z, &f_s, &cfg, &ProjectionSet::identity()).unwrap();
        assert_eq!((z.channels(), z.height(), z.width()), (64, 8, 8));
        assert_eq!((s.channels(), s.height(), s.width()), (64, 24, 24));
    }

    #[test]
    fn invalid_config_names_the_head() {
        let mut rng = SplitMix64::new(1);
        let f_z = random_map(&mut rng, 4, 6, 6);
        let f_s = random_map(&mut rng, 4, 12, 12);
        let cfg = MultiScaleConfig::from_windows(4, &[1, 2, 4, 3], true).unwrap();
        let err = multi_head_attention(&f_z, &f_s, &cfg, &ProjectionSet::identity()).unwrap_err();
        assert!(matches!(err, Error::Head { head: 2, .. }), "{err}");
        let cfg = MultiScaleConfig::from_windows(4, &[1, 2], true)
            .unwrap()
            .with_level("bogus");
        assert!(matches!(
            multi_head_attention(&f_z, &f_s, &cfg, &ProjectionSet::identity()),
            Err(Error::UnknownKernel(_))
        ));
    }

    #[test]
    fn duplicated_unit_heads_agree() {
        // heads 0 and 4 both use r = 1; translation by (0, 0) is a no-op
        let mut rng = SplitMix64::new(8);
        let d = 16;
        let block_z = random_map(&mut rng, 2, 8, 8);
        let block_s = random_map(&mut rng, 2, 24, 24);
        let fill = |block: &FeatureMap, h, w| {
            FeatureMap::from_fn(d, h, w, |c, y, x| {
                if c < 2 || (8..10).contains(&c) {
                    block.at(c % 8, y, x)
                } else {
                    0.5
                }
            })
            .unwrap()
        };
        let f_z = fill(&block_z, 8, 8);
        let f_s = fill(&block_s, 24, 24);
        let cfg = MultiScaleConfig::default_for(d).unwrap();
        let (z, s) = multi_head_attention(&f_z, &f_s, &cfg, &ProjectionSet::identity()).unwrap();
        assert_eq!(
            z.slice_channels(0..2).unwrap(),
            z.slice_channels(8..10).unwrap()
        );
        assert_eq!(
            s.slice_channels(0..2).unwrap(),
            s.slice_channels(8..10).unwrap()
        );
    }

    #[test]
    fn projections_change_the_output_and_identity_does_not() {
        let mut rng = SplitMix64::new(4);
        let f_z = random_map(&mut rng, 4, 4, 4);
        let f_s = random_map(&mut rng, 4, 8, 8);
        let cfg = MultiScaleConfig::from_windows(4, &[1, 2], true).unwrap();
        let base = multi_head_attention(&f_z, &f_s, &cfg, &ProjectionSet::identity()).unwrap();

        let mut explicit = ProjectionSet::identity();
        explicit.set_head(0, HeadProjection::identity(2));
        let same = multi_head_attention(&f_z, &f_s, &cfg, &explicit).unwrap();
        assert_eq!(base, same);

        let mut scaled = ProjectionSet::identity();
        scaled.set_output(4, {
            let mut m = vec![0.0; 16];
            for i in 0..4 {
                m[i * 4 + i] = 2.0;
            }
            m
        });
        let doubled = multi_head_attention(&f_z, &f_s, &cfg, &scaled).unwrap();
        assert_eq!(doubled.0, base.0.scale(2.0));
    }

    #[test]
    fn stacking_composes_layers() {
        let mut rng = SplitMix64::new(6);
        let f_z = random_map(&mut rng, 4, 4, 4);
        let f_s = random_map(&mut rng, 4, 8, 8);
        let cfg = MultiScaleConfig::from_windows(4, &[2, 4], true).unwrap();
        let id = ProjectionSet::identity();
        let one = multi_head_attention(&f_z, &f_s, &cfg, &id).unwrap();
        let two = multi_head_attention(&one.0, &one.1, &cfg, &id).unwrap();
        assert_eq!(
            stacked_attention(&f_z, &f_s, &cfg, &[id.clone(), id]).unwrap(),
            two
        );
    }
}
