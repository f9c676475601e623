//! Point quadtree over incoherent pixels and coarse-to-fine propagation.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, IncoherencePyramid, ProbMap};

/// Node of a [`PointQuadtree`]. Levels are 1-based (1 = coarsest).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadNode {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub incoherent: bool,
    pub refined: Option<f32>,
}

/// Arena-backed point quadtree. Nodes are stored in (level, row, col) order.
#[derive(Debug, Clone, PartialEq)]
pub struct PointQuadtree {
    nodes: Vec<QuadNode>,
    /// Per level, dense `row * size + col → node index + 1` (0 = absent).
    index: Vec<Vec<u32>>,
    sizes: Vec<usize>,
    roots: Vec<usize>,
}

impl PointQuadtree {
    /// Builds the tree from a detection pyramid (coarsest level first).
    ///
    /// Fails if a finer incoherent pixel has a coherent parent.
    pub fn build(det: &IncoherencePyramid) -> Result<Self> {
        let levels = det.levels();
        let sizes: Vec<usize> = levels.iter().map(|m| m.height()).collect();
        let mut nodes = Vec::new();
        let mut index: Vec<Vec<u32>> = sizes.iter().map(|&s| vec![0u32; s * s]).collect();
        let mut roots = Vec::new();

        if let Some(top) = levels.first() {
            let s = sizes[0];
            for r in 0..s {
                for c in 0..s {
                    if top.get(r, c) {
                        index[0][r * s + c] = nodes.len() as u32 + 1;
                        roots.push(nodes.len());
                        nodes.push(QuadNode {
                            level: 1,
                            row: r,
                            col: c,
                            parent: None,
                            children: Vec::new(),
                            incoherent: true,
                            refined: None,
                        });
                    }
                }
            }
        }
        for l in 1..levels.len() {
            let s = sizes[l];
            let ps = sizes[l - 1];
            for r in 0..s {
                for c in 0..s {
                    let inc = levels[l].get(r, c);
                    let slot = index[l - 1][(r / 2) * ps + c / 2];
                    let parent = (slot > 0)
                        .then(|| slot as usize - 1)
                        .filter(|&p| nodes[p].incoherent);
                    match parent {
                        Some(p) => {
                            let id = nodes.len();
                            index[l][r * s + c] = id as u32 + 1;
                            nodes[p].children.push(id);
                            nodes.push(QuadNode {
                                level: l + 1,
                                row: r,
                                col: c,
                                parent: Some(p),
                                children: Vec::new(),
                                incoherent: inc,
                                refined: None,
                            });
                        }
                        None if inc => {
                            return Err(Error::GuidanceViolation {
                                level: l + 1,
                                row: r,
                                col: c,
                            })
                        }
                        None => {}
                    }
                }
            }
        }
        Ok(Self {
            nodes,
            index,
            sizes,
            roots,
        })
    }

    pub fn depth(&self) -> usize {
        self.sizes.len()
    }

    /// Side length of 1-based `level`.
    pub fn level_size(&self, level: usize) -> usize {
        self.sizes[level - 1]
    }

    pub fn nodes(&self) -> &[QuadNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &QuadNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn find(&self, level: usize, row: usize, col: usize) -> Option<usize> {
        let s = *self.sizes.get(level.checked_sub(1)?)?;
        if row >= s || col >= s {
            return None;
        }
        let slot = self.index[level - 1][row * s + col];
        (slot > 0).then(|| slot as usize - 1)
    }

    /// Incoherent node ids in (level, row, col) order.
    pub fn incoherent_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.incoherent).map(|(i, _)| i)
    }

    pub fn incoherent_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.incoherent).count()
    }

    pub fn incoherent_per_level(&self) -> Vec<usize> {
        let mut counts = vec![0; self.depth()];
        for n in self.nodes.iter().filter(|n| n.incoherent) {
            counts[n.level - 1] += 1;
        }
        counts
    }

    /// Incoherent node count over the total pixel count of all levels.
    pub fn sparsity_ratio(&self) -> f64 {
        let total: usize = self.sizes.iter().map(|s| s * s).sum();
        if total == 0 {
            0.0
        } else {
            self.incoherent_count() as f64 / total as f64
        }
    }

    /// Incoherent nodes as a refiner sequence.
    ///
    /// With `cap = Some(k)` each non-empty level contributes exactly `k`
    /// nodes: a uniform subsample if it has at least `k`, otherwise uniform
    /// draws with replacement. With `None` every incoherent node is returned.
    pub fn incoherent_sequence<R: Rng>(&self, cap: Option<usize>, rng: &mut R) -> Vec<usize> {
        self.sequence(cap, true, rng)
    }

    /// Like [`Self::incoherent_sequence`] but over every node, including the
    /// coherent quadrant children of incoherent nodes.
    pub fn node_sequence<R: Rng>(&self, cap: Option<usize>, rng: &mut R) -> Vec<usize> {
        self.sequence(cap, false, rng)
    }

    fn sequence<R: Rng>(&self, cap: Option<usize>, incoherent_only: bool, rng: &mut R) -> Vec<usize> {
        let keep = |i: &usize| !incoherent_only || self.nodes[*i].incoherent;
        let Some(cap) = cap else {
            return (0..self.nodes.len()).filter(keep).collect();
        };
        let mut out = Vec::new();
        for level in 1..=self.depth() {
            let ids: Vec<usize> = (0..self.nodes.len())
                .filter(keep)
                .filter(|&i| self.nodes[i].level == level)
                .collect();
            if ids.is_empty() {
                continue;
            }
            if ids.len() >= cap {
                out.extend(index::sample(rng, ids.len(), cap).into_iter().map(|k| ids[k]));
            } else {
                out.extend((0..cap).map(|_| ids[rng.gen_range(0..ids.len())]));
            }
        }
        out
    }

    pub fn set_value(&mut self, id: usize, v: f32) {
        self.nodes[id].refined = Some(v);
    }

    pub fn clear_values(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.refined = None);
    }

    /// Oracle values: the ground truth sampled (top-left phase) at each node's
    /// level resolution. `all_nodes` also fills coherent nodes.
    pub fn fill_from_gt(&mut self, gt: &BinaryMask, all_nodes: bool) -> Result<()> {
        for n in &mut self.nodes {
            if !(all_nodes || n.incoherent) {
                continue;
            }
            let s = self.sizes[n.level - 1];
            if gt.height() % s != 0 || gt.width() != gt.height() {
                return Err(Error::Shape(format!(
                    "ground truth {}x{} is not a multiple of level size {s}",
                    gt.height(),
                    gt.width()
                )));
            }
            let f = gt.height() / s;
            n.refined = Some(if gt.get(n.row * f, n.col * f) { 1.0 } else { 0.0 });
        }
        Ok(())
    }

    fn check_coarse(&self, coarse: &ProbMap, out_size: usize) -> Result<()> {
        if let Some(&s) = self.sizes.first() {
            if coarse.height != s || coarse.width != s {
                return Err(Error::Shape(format!(
                    "coarse map {}x{} does not match the tree's {s}x{s} top level",
                    coarse.height, coarse.width
                )));
            }
        }
        let finest = *self.sizes.last().unwrap_or(&coarse.height);
        if out_size < finest || out_size % coarse.height != 0 || (out_size / coarse.height).count_ones() != 1 {
            return Err(Error::InvalidArgument(format!(
                "output size {out_size} is not a power-of-two multiple of {}",
                coarse.height
            )));
        }
        Ok(())
    }

    fn write_level(&self, level: usize, map: &mut ProbMap) -> Result<()> {
        for n in self.nodes.iter().filter(|n| n.level == level) {
            match n.refined {
                Some(v) => map.set(n.row, n.col, v),
                None if n.incoherent => {
                    return Err(Error::MissingValue {
                        level: n.level,
                        row: n.row,
                        col: n.col,
                    })
                }
                None => {}
            }
        }
        Ok(())
    }

    /// Level-wise overwrite and nearest-neighbor upsampling, returning the
    /// probability map at `out_size`.
    pub fn propagate_prob(&self, coarse: &ProbMap, out_size: usize) -> Result<ProbMap> {
        self.check_coarse(coarse, out_size)?;
        let mut cur = coarse.clone();
        for level in 1..=self.depth() {
            if level > 1 {
                cur = cur.upsample_by(2);
            }
            self.write_level(level, &mut cur)?;
        }
        Ok(cur.upsample_by(out_size / cur.height))
    }

    pub fn propagate(&self, coarse: &ProbMap, out_size: usize) -> Result<BinaryMask> {
        Ok(self.propagate_prob(coarse, out_size)?.threshold(0.5))
    }

    /// Overwrites only the finest level onto the upsampled coarse map.
    pub fn finest_only_propagate_prob(&self, coarse: &ProbMap, out_size: usize) -> Result<ProbMap> {
        self.check_coarse(coarse, out_size)?;
        let depth = self.depth();
        if depth == 0 {
            return Ok(coarse.upsample_by(out_size / coarse.height));
        }
        let mut cur = coarse.upsample_by(self.sizes[depth - 1] / coarse.height);
        self.write_level(depth, &mut cur)?;
        Ok(cur.upsample_by(out_size / cur.height))
    }

    pub fn finest_only_propagate(&self, coarse: &ProbMap, out_size: usize) -> Result<BinaryMask> {
        Ok(self.finest_only_propagate_prob(coarse, out_size)?.threshold(0.5))
    }

    /// Output pixels at `out_size` covered by nodes of the selected levels.
    pub fn footprint(&self, out_size: usize, levels: &[usize]) -> BinaryMask {
        let mut m = BinaryMask::zeros(out_size, out_size);
        for n in self.nodes.iter().filter(|n| levels.contains(&n.level)) {
            let f = out_size / self.sizes[n.level - 1];
            for r in n.row * f..(n.row + 1) * f {
                for c in n.col * f..(n.col + 1) * f {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    /// One `level,row,col,incoherent,refined_value` line per node.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let v = n.refined.map_or_else(|| "none".to_string(), |v| format!("{v}"));
            let _ = writeln!(s, "{},{},{},{},{}", n.level, n.row, n.col, u8::from(n.incoherent), v);
        }
        s
    }
}
