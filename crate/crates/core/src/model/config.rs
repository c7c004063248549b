use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskVariant {
    /// Encoder only; the last level's features are the point-wise output.
    Classification,
    /// Encoder, transition-up decoder and per-level heads back to every
    /// input point.
    Segmentation,
}

impl std::str::FromStr for TaskVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "classification" | "classify" => Ok(TaskVariant::Classification),
            "segmentation" | "segment" => Ok(TaskVariant::Segmentation),
            _ => Err(format!("unknown task variant `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpNetConfig {
    pub variant: TaskVariant,
    /// Centres per level for a cloud of `points_per_level[0]` points. Other
    /// cloud sizes scale every level proportionally.
    pub points_per_level: Vec<usize>,
    pub channels_per_level: Vec<usize>,
    /// Width of each level's point-wise head (segmentation only).
    pub head_widths: Vec<usize>,
    pub k_neighbors: usize,
    /// Neighbours used by inverse-distance interpolation.
    pub interp_k: usize,
    pub weight_net_hidden: usize,
    pub use_batch_norm: bool,
    pub bn_eps: f64,
    /// Include the absolute coordinates of centre and neighbour in the
    /// relation vector. Without them a level is translation invariant.
    pub absolute_relation: bool,
    /// Side of the folding lattice; `None` picks `ceil(sqrt(N))`.
    pub fold_grid_side: Option<usize>,
    pub fold_hidden: usize,
    pub normal_head: bool,
    pub normal_hidden: usize,
}

impl CpNetConfig {
    /// Four levels with transition-up, channels (32, 64, 128, 256).
    pub fn segmentation(n: usize) -> Self {
        CpNetConfig {
            variant: TaskVariant::Segmentation,
            points_per_level: halving(n, 4),
            channels_per_level: vec![32, 64, 128, 256],
            head_widths: vec![32; 4],
            k_neighbors: 16,
            interp_k: 3,
            weight_net_hidden: 16,
            use_batch_norm: true,
            bn_eps: 1e-5,
            absolute_relation: true,
            fold_grid_side: None,
            fold_hidden: 64,
            normal_head: true,
            normal_hidden: 64,
        }
    }

    /// Three levels, channels (32, 64, 128), no decoder and no normal head.
    pub fn classification(n: usize) -> Self {
        CpNetConfig {
            variant: TaskVariant::Classification,
            points_per_level: halving(n, 3),
            channels_per_level: vec![32, 64, 128],
            head_widths: Vec::new(),
            normal_head: false,
            ..Self::segmentation(n)
        }
    }

    pub fn levels(&self) -> usize {
        self.points_per_level.len()
    }

    /// Nominal cloud size the level counts refer to.
    pub fn nominal_points(&self) -> usize {
        self.points_per_level.first().copied().unwrap_or(0)
    }

    /// Width of the point-wise feature `Y` (and of the global feature `G`).
    pub fn feature_width(&self) -> usize {
        match self.variant {
            TaskVariant::Segmentation => self.head_widths.iter().sum(),
            TaskVariant::Classification => *self.channels_per_level.last().unwrap_or(&0),
        }
    }

    /// Level sizes for a cloud of `n` points: the nominal sizes scaled by
    /// `n / nominal`, rounded, kept at least one and strictly decreasing
    /// where the cloud allows it.
    pub fn level_sizes(&self, n: usize) -> Vec<usize> {
        let nominal = self.nominal_points().max(1);
        let mut out: Vec<usize> = Vec::with_capacity(self.levels());
        for &p in &self.points_per_level {
            let scaled = ((p * n + nominal / 2) / nominal).clamp(1, n);
            let m = match out.last() {
                Some(&prev) if scaled >= prev => prev.saturating_sub(1).max(1),
                _ => scaled,
            };
            out.push(m);
        }
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        let l = self.levels();
        if l == 0 {
            return bad("at least one level is required".into());
        }
        if self.channels_per_level.len() != l {
            return bad(format!("{} channel widths for {l} levels", self.channels_per_level.len()));
        }
        if self.variant == TaskVariant::Segmentation && self.head_widths.len() != l {
            return bad(format!("{} head widths for {l} levels", self.head_widths.len()));
        }
        if self.points_per_level.windows(2).any(|w| w[1] >= w[0]) || self.points_per_level[l - 1] == 0 {
            return bad(format!(
                "points per level must be positive and strictly decreasing: {:?}",
                self.points_per_level
            ));
        }
        let widths = self.channels_per_level.iter().chain(&self.head_widths);
        if widths.into_iter().any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        if self.k_neighbors == 0 || self.interp_k == 0 {
            return bad("neighbour counts must be positive".into());
        }
        if self.weight_net_hidden == 0 || self.fold_hidden == 0 || self.normal_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if !(self.bn_eps > 0.0) {
            return bad(format!("bn_eps = {}", self.bn_eps));
        }
        if let Some(side) = self.fold_grid_side {
            if side * side < self.nominal_points() {
                return bad(format!(
                    "fold grid side {side} gives fewer than {} lattice points",
                    self.nominal_points()
                ));
            }
        }
        Ok(())
    }
}

fn halving(n: usize, levels: usize) -> Vec<usize> {
    (0..levels).map(|i| (n >> i).max(1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        CpNetConfig::segmentation(256).validate().unwrap();
        CpNetConfig::classification(256).validate().unwrap();
        assert_eq!(CpNetConfig::segmentation(256).points_per_level, vec![256, 128, 64, 32]);
        assert_eq!(CpNetConfig::segmentation(256).feature_width(), 128);
        assert_eq!(CpNetConfig::classification(256).feature_width(), 128);
    }

    #[test]
    fn level_sizes_scale() {
        let c = CpNetConfig::segmentation(256);
        assert_eq!(c.level_sizes(256), vec![256, 128, 64, 32]);
        assert_eq!(c.level_sizes(128), vec![128, 64, 32, 16]);
        assert_eq!(c.level_sizes(3), vec![3, 2, 1, 1]);
    }

    #[test]
    fn bad_configs() {
        let mut c = CpNetConfig::segmentation(64);
        c.channels_per_level.pop();
        assert!(c.validate().is_err());
        let mut c = CpNetConfig::segmentation(64);
        c.points_per_level = vec![64, 64, 16, 8];
        assert!(c.validate().is_err());
        let mut c = CpNetConfig::segmentation(64);
        c.fold_grid_side = Some(7);
        assert!(c.validate().is_err());
    }
}
