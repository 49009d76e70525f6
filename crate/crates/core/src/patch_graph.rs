//! Patch graphs: image patches (or synthetic node features) as nodes, with
//! symmetrized k-nearest-neighbour edges and self-loops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const DEFAULT_EMBED_DIM: usize = 64;

/// An `H x W x 3` image with values in `[0, 1]`, stored row-major and
/// channel-last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl PatchGrid {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "{} pixel values for a {height}x{width}x3 grid",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * Self::CHANNELS + c]
    }

    /// Number of patches for a given patch size.
    pub fn patch_count(&self, patch_size: usize) -> Result<usize> {
        check_divisible(self, patch_size)?;
        Ok((self.height / patch_size) * (self.width / patch_size))
    }

    /// Flattened patches, one row per patch in raster order,
    /// `N x (patch_size^2 * 3)`.
    pub fn patchify(&self, patch_size: usize) -> Result<DenseMatrix> {
        let n = self.patch_count(patch_size)?;
        let per = patch_size * patch_size * Self::CHANNELS;
        let across = self.width / patch_size;
        let mut out = DenseMatrix::zeros(n, per);
        for p in 0..n {
            let (py, px) = (p / across, p % across);
            let row = out.row_mut(p);
            let mut i = 0;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    for c in 0..Self::CHANNELS {
                        row[i] = self.pixel(py * patch_size + dy, px * patch_size + dx, c);
                        i += 1;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn check_divisible(grid: &PatchGrid, patch_size: usize) -> Result<()> {
    if patch_size == 0 || !grid.height.is_multiple_of(patch_size) || !grid.width.is_multiple_of(patch_size) {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} does not divide a {}x{} grid",
            grid.height, grid.width
        )));
    }
    Ok(())
}

/// Linear patch embedding, equivalent to a stride-`patch_size` convolution:
/// `patchify(grid) · weight + bias`.
pub fn build_patch_embeddings(
    grid: &PatchGrid,
    patch_size: usize,
    weight: &DenseMatrix,
    bias: &DenseMatrix,
) -> Result<DenseMatrix> {
    let patches = grid.patchify(patch_size)?;
    let mut out = patches.matmul(weight)?;
    if bias.shape() != (1, out.cols()) {
        return Err(Error::Shape(format!("patch bias {:?} for dim {}", bias.shape(), out.cols())));
    }
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Directed edge `(from, to)`.
pub type Edge = (usize, usize);

/// Each node's `k` nearest other nodes by Euclidean distance, ties going to
/// the lower index.
pub fn knn_edges(x: &DenseMatrix, k: usize) -> Result<Vec<Edge>> {
    let n = x.rows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("k = {k} needs 1 <= k < N = {n}")));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        candidates.clear();
        let xi = x.row(i);
        for j in (0..n).filter(|&j| j != i) {
            let d2: f64 = xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            candidates.push((d2, j));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(candidates.iter().take(k).map(|&(_, j)| (i, j)));
    }
    Ok(edges)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGraph {
    pub features: DenseMatrix,
    /// Symmetric `{0,1}` matrix with unit diagonal.
    pub adjacency: DenseMatrix,
    pub degree: Vec<f64>,
    /// Initialized to the node features.
    pub message: DenseMatrix,
    /// Undirected edges `(i, j)` with `i < j`, self-loops excluded.
    pub edges: Vec<Edge>,
}

impl PatchGraph {
    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Assembles the graph: union-symmetrized adjacency plus self-loops.
pub fn build_graph(x: &DenseMatrix, edges: &[Edge]) -> Result<PatchGraph> {
    let n = x.rows();
    let mut adjacency = DenseMatrix::identity(n);
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::InvalidArgument(format!("edge ({i}, {j}) outside {n} nodes")));
        }
        adjacency.set(i, j, 1.0);
        adjacency.set(j, i, 1.0);
    }
    let degree = adjacency.row_sums();
    let mut undirected = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if adjacency.get(i, j) != 0.0 {
                undirected.push((i, j));
            }
        }
    }
    Ok(PatchGraph {
        features: x.clone(),
        adjacency,
        degree,
        message: x.clone(),
        edges: undirected,
    })
}

/// `knn_edges` followed by `build_graph`.
pub fn knn_graph(x: &DenseMatrix, k: usize) -> Result<PatchGraph> {
    let edges = knn_edges(x, k)?;
    build_graph(x, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_patch_grid() {
        let grid = PatchGrid::zeros(16, 16);
        assert_eq!(grid.patch_count(16).unwrap(), 1);
    }

    #[test]
    fn crop_224_with_patch_16() {
        let grid = PatchGrid::zeros(224, 224);
        assert_eq!(grid.patch_count(16).unwrap(), 196);
        assert_eq!(grid.patchify(16).unwrap().shape(), (196, 16 * 16 * 3));
    }

    #[test]
    fn zero_image_zero_bias_embeds_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = PatchGrid::zeros(8, 8);
        let w = DenseMatrix::random_normal(4 * 4 * 3, 6, 1.0, &mut rng);
        let e = build_patch_embeddings(&grid, 4, &w, &DenseMatrix::zeros(1, 6)).unwrap();
        assert_eq!(e.shape(), (4, 6));
        assert!(e.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_divisible_grid_is_rejected() {
        let grid = PatchGrid::zeros(10, 8);
        assert!(grid.patch_count(4).is_err());
        assert!(grid.patchify(3).is_err());
    }

    #[test]
    fn patchify_orders_pixels_within_patch() {
        let pixels: Vec<f64> = (0..4 * 4 * 3).map(|i| i as f64 / 47.0).collect();
        let grid = PatchGrid::new(4, 4, pixels).unwrap();
        let p = grid.patchify(2).unwrap();
        // second patch (top-right) starts at pixel (0, 2)
        assert_eq!(p.get(1, 0), grid.pixel(0, 2, 0));
        assert_eq!(p.get(2, 3), grid.pixel(2, 1, 0));
    }

    #[test]
    fn two_nodes_are_mutual_neighbours() {
        let x = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(knn_edges(&x, 1).unwrap(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn k_must_be_below_node_count() {
        let x = DenseMatrix::zeros(3, 2);
        assert!(knn_edges(&x, 3).is_err());
        assert!(knn_edges(&x, 0).is_err());
    }

    #[test]
    fn duplicate_points_break_ties_by_index() {
        let x = DenseMatrix::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        let edges = knn_edges(&x, 2).unwrap();
        assert_eq!(edges, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (3, 0), (3, 1)]);
    }

    /// All-pairs distance sort, independent of the implementation's loop.
    fn brute_force_knn(x: &DenseMatrix, k: usize) -> Vec<Vec<usize>> {
        (0..x.rows())
            .map(|i| {
                let mut others: Vec<(usize, f64)> = (0..x.rows())
                    .filter(|&j| j != i)
                    .map(|j| {
                        let d = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                        (j, d)
                    })
                    .collect();
                others.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
                let mut out: Vec<usize> = others[..k].iter().map(|o| o.0).collect();
                out.sort_unstable();
                out
            })
            .collect()
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = DenseMatrix::random_normal(10, 4, 1.0, &mut rng);
        let edges = knn_edges(&x, 3).unwrap();
        let expected = brute_force_knn(&x, 3);
        for (i, want) in expected.iter().enumerate() {
            let mut got: Vec<usize> = edges.iter().filter(|e| e.0 == i).map(|e| e.1).collect();
            got.sort_unstable();
            assert_eq!(&got, want, "node {i}");
        }
    }

    #[test]
    fn empty_edges_give_identity() {
        let g = build_graph(&DenseMatrix::zeros(3, 2), &[]).unwrap();
        assert_eq!(g.adjacency, DenseMatrix::identity(3));
        assert_eq!(g.degree, vec![1.0; 3]);
    }

    #[test]
    fn path_graph_degrees_and_message_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DenseMatrix::random_normal(3, 2, 1.0, &mut rng);
        let g = build_graph(&x, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.degree, vec![2.0, 3.0, 2.0]);
        assert_eq!(g.message, x);
        assert!(build_graph(&x, &[(0, 5)]).is_err());
    }

    proptest! {
        #[test]
        fn adjacency_is_symmetric_binary_with_self_loops(seed in any::<u64>(), n in 2usize..10, k in 1usize..4) {
            let k = k.min(n - 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DenseMatrix::random_normal(n, 3, 1.0, &mut rng);
            let g = knn_graph(&x, k).unwrap();
            for i in 0..n {
                prop_assert_eq!(g.adjacency.get(i, i), 1.0);
                prop_assert!(g.degree[i] >= 1.0);
                let row_sum: f64 = g.adjacency.row(i).iter().sum();
                prop_assert_eq!(g.degree[i], row_sum);
                for j in 0..n {
                    let a = g.adjacency.get(i, j);
                    prop_assert!(a == 0.0 || a == 1.0);
                    prop_assert_eq!(a, g.adjacency.get(j, i));
                }
            }
        }

        #[test]
        fn knn_is_permutation_equivariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 7;
            let x = DenseMatrix::random_normal(n, 3, 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            // row r of the permuted matrix is original node perm[r]
            let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row(p).to_vec()).collect();
            let xp = DenseMatrix::from_rows(&rows).unwrap();
            let mut original: Vec<Edge> = knn_edges(&x, 2).unwrap();
            let mut relabeled: Vec<Edge> = knn_edges(&xp, 2).unwrap().into_iter().map(|(a, b)| (perm[a], perm[b])).collect();
            original.sort_unstable();
            relabeled.sort_unstable();
            prop_assert_eq!(original, relabeled);
        }
    }
}
