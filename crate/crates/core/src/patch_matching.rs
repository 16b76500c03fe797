//! Corner-anchored 5×5 windows over the 7×7 token grid and the local
//! transformer branches that turn each window into a feature.

use std::fmt;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{linear, norm_specs, Block, BlockHooks, BlockWeights};
use crate::params::{Init, ParamSpec};

pub const GRID: usize = 7;
pub const WINDOW: usize = 5;
pub const PREFIX: &str = "local";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Corner {
    pub const ALL: [Corner; 4] = [
        Corner::TopLeft,
        Corner::TopRight,
        Corner::BottomLeft,
        Corner::BottomRight,
    ];

    /// Top-left cell of the window.
    pub fn origin(self) -> (usize, usize) {
        let far = GRID - WINDOW;
        match self {
            Corner::TopLeft => (0, 0),
            Corner::TopRight => (0, far),
            Corner::BottomLeft => (far, 0),
            Corner::BottomRight => (far, far),
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Corner::TopLeft => "TL",
            Corner::TopRight => "TR",
            Corner::BottomLeft => "BL",
            Corner::BottomRight => "BR",
        }
    }
}

impl fmt::Display for Corner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Row-major grid indices of the four windows, ordered TL, TR, BL, BR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPartition {
    pub sets: [Vec<usize>; 4],
}

impl PatchPartition {
    pub fn new() -> Self {
        Self {
            sets: Corner::ALL.map(|c| {
                let (r0, c0) = c.origin();
                (r0..r0 + WINDOW)
                    .flat_map(|r| (c0..c0 + WINDOW).map(move |col| r * GRID + col))
                    .collect()
            }),
        }
    }

    pub fn get(&self, corner: Corner) -> &[usize] {
        &self.sets[corner as usize]
    }
}

impl Default for PatchPartition {
    fn default() -> Self {
        Self::new()
    }
}

/// `[cls] ++ window tokens` for each corner, each `26 × L_V`.
pub fn partition_grid(g: &mut Graph, grid: Var, cls: Var) -> Result<[Var; 4]> {
    if g.shape(grid).0 != GRID * GRID {
        return Err(Error::Shape(format!(
            "token grid has {} rows, expected {}",
            g.shape(grid).0,
            GRID * GRID
        )));
    }
    if g.shape(cls) != (1, g.shape(grid).1) {
        return Err(Error::Shape(format!("cls token {:?}", g.shape(cls))));
    }
    let part = PatchPartition::new();
    Ok(Corner::ALL.map(|c| {
        let window = g.gather_rows(grid, part.get(c));
        g.concat_rows(&[cls, window])
    }))
}

pub fn branch_prefix(corner: Corner) -> String {
    format!("{PREFIX}.{}", corner as usize)
}

/// Four local branches. Attention and MLP weights are read from the final
/// backbone layer; each branch owns its norms and an output projection.
#[derive(Debug, Clone)]
pub struct PatchMatcher {
    pub embed_dim: usize,
    pub source_layer: usize,
    pub heads: usize,
    pub eps: f64,
}

impl PatchMatcher {
    /// Norms start as ones/zeros here; the model overwrites them with copies
    /// of the source layer's norms.
    pub fn specs(&self) -> Vec<ParamSpec> {
        let d = self.embed_dim;
        let mut v = Vec::new();
        for c in Corner::ALL {
            let p = branch_prefix(c);
            v.extend(norm_specs(&format!("{p}.ln_1"), d));
            v.extend(norm_specs(&format!("{p}.ln_2"), d));
            v.push(ParamSpec::new(format!("{p}.proj.weight"), (d, d), Init::Identity));
            v.push(ParamSpec::new(format!("{p}.proj.bias"), (1, d), Init::Zeros));
        }
        v
    }

    /// Names of the norm tensors each branch copies at construction, as
    /// `(branch tensor, source tensor)`.
    pub fn copied_norms(&self) -> Vec<(String, String)> {
        let src = Backbone::layer_prefix(self.source_layer);
        let mut v = Vec::new();
        for c in Corner::ALL {
            let p = branch_prefix(c);
            for ln in ["ln_1", "ln_2"] {
                for t in ["weight", "bias"] {
                    v.push((format!("{p}.{ln}.{t}"), format!("{src}.{ln}.{t}")));
                }
            }
        }
        v
    }

    pub fn block(&self, corner: Corner) -> Block {
        let p = branch_prefix(corner);
        let src = BlockWeights::under(&Backbone::layer_prefix(self.source_layer));
        Block {
            weights: BlockWeights {
                ln_1: format!("{p}.ln_1"),
                attn: src.attn,
                ln_2: format!("{p}.ln_2"),
                mlp: src.mlp,
            },
            heads: self.heads,
            causal: false,
            eps: self.eps,
        }
    }

    /// Projected CLS output of each branch, each `1 × L_V`.
    pub fn local_features(&self, g: &mut Graph, seqs: &[Var; 4]) -> [Var; 4] {
        let mut out = [seqs[0]; 4];
        for (k, c) in Corner::ALL.into_iter().enumerate() {
            let y = self.block(c).forward(g, seqs[k], &BlockHooks::default());
            let cls = g.slice_rows(y, 0, 1);
            out[k] = linear(g, cls, &format!("{}.proj", branch_prefix(c)), true);
        }
        out
    }

    pub fn forward(&self, g: &mut Graph, grid: Var, cls: Var) -> Result<[Var; 4]> {
        let seqs = partition_grid(g, grid, cls)?;
        Ok(self.local_features(g, &seqs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mat;
    use crate::params::ParamStore;
    use std::collections::BTreeSet;

    #[test]
    fn window_membership() {
        let p = PatchPartition::new();
        let cell = |r: usize, c: usize| r * GRID + c;
        let holders = |idx: usize| {
            Corner::ALL
                .into_iter()
                .filter(|c| p.get(*c).contains(&idx))
                .collect::<Vec<_>>()
        };
        assert_eq!(holders(cell(0, 0)), vec![Corner::TopLeft]);
        assert_eq!(holders(cell(6, 6)), vec![Corner::BottomRight]);
        assert_eq!(holders(cell(3, 3)).len(), 4);
        let tl: BTreeSet<_> = p.get(Corner::TopLeft).iter().collect();
        let tr: BTreeSet<_> = p.get(Corner::TopRight).iter().collect();
        assert_eq!(tl.intersection(&tr).count(), 15);
    }

    fn setup() -> (PatchMatcher, ParamStore) {
        let m = PatchMatcher {
            embed_dim: 8,
            source_layer: 1,
            heads: 2,
            eps: 1e-5,
        };
        let mut specs = m.specs();
        specs.extend(BlockWeights::specs(&Backbone::layer_prefix(1), 8, 32));
        let mut store = ParamStore::from_specs(&specs, 5);
        for (dst, src) in m.copied_norms() {
            let v = store.get(&src).unwrap().clone();
            store.insert(&dst, v);
        }
        (m, store)
    }

    #[test]
    fn sequences_are_cls_plus_window() {
        let (_, store) = setup();
        let mut g = Graph::new(&store);
        let grid = g.constant(Mat::from_shape_fn((49, 8), |(i, j)| (i * 8 + j) as f64));
        let cls = g.constant(Mat::from_elem((1, 8), -1.0));
        let seqs = partition_grid(&mut g, grid, cls).unwrap();
        let br = g.value(seqs[3]);
        assert_eq!(br.dim(), (26, 8));
        assert_eq!(br[[0, 0]], -1.0);
        // First BR cell is (2, 2) = index 16.
        assert_eq!(br[[1, 0]], (16 * 8) as f64);
        let short = g.constant(Mat::zeros((48, 8)));
        assert!(partition_grid(&mut g, short, cls).is_err());
    }

    #[test]
    fn fresh_branches_match_source_layer_cls() {
        let (m, store) = setup();
        let mut g = Graph::new(&store);
        let seq = g.constant(Mat::from_shape_fn((26, 8), |(i, j)| ((i * 3 + j * 7) % 11) as f64 * 0.1));
        let feats = m.local_features(&mut g, &[seq; 4]);
        let src = Block {
            weights: BlockWeights::under(&Backbone::layer_prefix(1)),
            heads: 2,
            causal: false,
            eps: 1e-5,
        };
        let y = src.forward(&mut g, seq, &BlockHooks::default());
        let cls = g.slice_rows(y, 0, 1);
        for f in feats {
            assert_eq!(g.value(f), g.value(cls));
        }
    }

    #[test]
    fn constant_grid_gives_equal_corner_features() {
        let (m, store) = setup();
        let mut g = Graph::new(&store);
        let grid = g.constant(Mat::from_elem((49, 8), 0.3));
        let cls = g.constant(Mat::from_shape_fn((1, 8), |(_, j)| j as f64 * 0.1));
        let f = m.forward(&mut g, grid, cls).unwrap();
        for k in 1..4 {
            assert_eq!(g.value(f[0]), g.value(f[k]));
        }
    }

    #[test]
    fn distinct_branch_params_give_distinct_outputs() {
        let (m, mut store) = setup();
        store.get_mut("local.2.ln_2.weight").unwrap().mapv_inplace(|v| v * 1.5);
        store.get_mut("local.2.proj.bias").unwrap().fill(0.01);
        let mut g = Graph::new(&store);
        let seq = g.constant(Mat::from_shape_fn((26, 8), |(i, j)| ((i + j) % 5) as f64 * 0.2));
        let f = m.local_features(&mut g, &[seq; 4]);
        assert_ne!(g.value(f[0]), g.value(f[2]));
        assert_eq!(g.value(f[0]), g.value(f[1]));
    }
}
