//! Voxel neighbourhoods, Bowsher selection and local statistics.

use rayon::prelude::*;

use crate::volume::Volume;

/// Neighbour offsets of a cube of the given radius without its centre, in
/// increasing linear-offset order.
fn cube_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if (dx, dy, dz) != (0, 0, 0) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Per-voxel neighbour lists in compressed-row form. Lists are sorted by
/// linear index.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSets {
    row_ptr: Vec<usize>,
    idx: Vec<u32>,
}

impl NeighborSets {
    fn from_lists(lists: Vec<Vec<u32>>) -> Self {
        let mut row_ptr = Vec::with_capacity(lists.len() + 1);
        row_ptr.push(0);
        let mut idx = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for l in lists {
            idx.extend_from_slice(&l);
            row_ptr.push(idx.len());
        }
        NeighborSets { row_ptr, idx }
    }

    pub fn n_voxels(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_pairs(&self) -> usize {
        self.idx.len()
    }

    pub fn of(&self, j: usize) -> &[u32] {
        &self.idx[self.row_ptr[j]..self.row_ptr[j + 1]]
    }

    /// Position of voxel `j`'s first pair in the flat pair arrays.
    pub fn offset(&self, j: usize) -> usize {
        self.row_ptr[j]
    }

    /// For every voxel `k`, the flat pair indices `(j, b)` with `b == k`.
    pub fn incoming(&self) -> (Vec<usize>, Vec<u32>) {
        let n = self.n_voxels();
        let mut count = vec![0usize; n + 1];
        for &b in &self.idx {
            count[b as usize + 1] += 1;
        }
        for k in 0..n {
            count[k + 1] += count[k];
        }
        let mut fill = count.clone();
        let mut pairs = vec![0u32; self.idx.len()];
        for j in 0..n {
            for p in self.row_ptr[j]..self.row_ptr[j + 1] {
                let b = self.idx[p] as usize;
                pairs[fill[b]] = p as u32;
                fill[b] += 1;
            }
        }
        (count, pairs)
    }
}

fn neighbors_of(j: usize, dims: [usize; 3], offsets: &[[isize; 3]]) -> Vec<u32> {
    let [nx, ny, nz] = dims;
    let (x, y, z) = ((j % nx) as isize, ((j / nx) % ny) as isize, (j / (nx * ny)) as isize);
    offsets
        .iter()
        .filter_map(|o| {
            let (a, b, c) = (x + o[0], y + o[1], z + o[2]);
            let inside = a >= 0 && b >= 0 && c >= 0 && a < nx as isize && b < ny as isize && c < nz as isize;
            inside.then(|| (a as usize + nx * (b as usize + ny * c as usize)) as u32)
        })
        .collect()
}

/// The full cube neighbourhood `N_j`, truncated at the volume border.
pub fn full_neighborhood(dims: [usize; 3], radius: usize) -> NeighborSets {
    let offsets = cube_offsets(radius);
    let n: usize = dims.iter().product();
    let lists = (0..n)
        .into_par_iter()
        .map(|j| neighbors_of(j, dims, &offsets))
        .collect();
    NeighborSets::from_lists(lists)
}

/// For each voxel the `b` neighbours in the cube of `radius` whose values are
/// closest to its own; ties go to the smaller linear index. `b` is clamped to
/// the available neighbours, and `b = 0` gives empty sets.
pub fn bowsher_select(v: &Volume, radius: usize, b: usize) -> NeighborSets {
    let offsets = cube_offsets(radius);
    let dims = v.dims();
    let data = v.data();
    let lists = (0..v.len())
        .into_par_iter()
        .map(|j| {
            let mut cand = neighbors_of(j, dims, &offsets);
            let vj = data[j];
            // stable sort keeps index order among equal distances
            cand.sort_by(|&p, &q| {
                let dp = (data[p as usize] - vj).abs();
                let dq = (data[q as usize] - vj).abs();
                dp.partial_cmp(&dq).unwrap()
            });
            cand.truncate(b);
            cand.sort_unstable();
            cand
        })
        .collect();
    NeighborSets::from_lists(lists)
}

/// Population standard deviation of `x` over each voxel's neighbourhood
/// together with the voxel itself.
pub fn local_sd(x: &[f64], full: &NeighborSets) -> Vec<f64> {
    (0..full.n_voxels())
        .into_par_iter()
        .map(|j| {
            let nb = full.of(j);
            let n = (nb.len() + 1) as f64;
            let mean = (x[j] + nb.iter().map(|&b| x[b as usize]).sum::<f64>()) / n;
            let ss = (x[j] - mean).powi(2) + nb.iter().map(|&b| (x[b as usize] - mean).powi(2)).sum::<f64>();
            (ss / n).sqrt()
        })
        .collect()
}

/// `z_j`: mean of `u` over voxel `j` and its selected neighbours.
pub fn region_mean_weight(u: &[f64], selected: &NeighborSets) -> Vec<f64> {
    (0..selected.n_voxels())
        .into_par_iter()
        .map(|j| {
            let nb = selected.of(j);
            (u[j] + nb.iter().map(|&b| u[b as usize]).sum::<f64>()) / (nb.len() + 1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeKind;
    use crate::RngStream;
    use rand::Rng;

    fn vol(dims: [usize; 3], data: Vec<f64>) -> Volume {
        Volume::new(dims, [1.0; 3], VolumeKind::Generic, data).unwrap()
    }

    #[test]
    fn neighbourhood_sizes() {
        let n = full_neighborhood([4, 4, 4], 1);
        let corner = 0;
        let centre = 1 + 4 * (1 + 4);
        assert_eq!(n.of(corner).len(), 7);
        assert_eq!(n.of(centre).len(), 26);
        assert!(n.of(centre).windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn constant_image_takes_first_neighbours() {
        let v = vol([5, 5, 5], vec![2.0; 125]);
        let centre = 2 + 5 * (2 + 5 * 2);
        let sel = bowsher_select(&v, 1, 13);
        let all = full_neighborhood([5, 5, 5], 1);
        assert_eq!(sel.of(centre), &all.of(centre)[..13]);
    }

    #[test]
    fn matching_neighbour_is_selected() {
        let mut data = vec![100.0; 27];
        data[13] = 1.0;
        data[22] = 1.0;
        let sel = bowsher_select(&vol([3, 3, 3], data), 1, 1);
        assert_eq!(sel.of(13), &[22]);
    }

    #[test]
    fn all_neighbours_when_b_is_full() {
        let mut g = RngStream::new(2).generator();
        let v = vol([6, 5, 4], (0..120).map(|_| g.random::<f64>()).collect());
        assert_eq!(bowsher_select(&v, 1, 26), full_neighborhood([6, 5, 4], 1));
        let empty = bowsher_select(&v, 1, 0);
        assert_eq!(empty.n_pairs(), 0);
        let u: Vec<f64> = v.data().to_vec();
        assert_eq!(region_mean_weight(&u, &empty), u);
    }

    #[test]
    fn region_mean_cases() {
        let sel = NeighborSets::from_lists(vec![vec![1], vec![]]);
        assert_eq!(region_mean_weight(&[1.0, 3.0], &sel), vec![2.0, 3.0]);
        let all = full_neighborhood([4, 3, 2], 1);
        assert!(region_mean_weight(&[7.0; 24], &all).iter().all(|&z| (z - 7.0).abs() < 1e-12));
    }

    #[test]
    fn incoming_pairs_invert_rows() {
        let sel = NeighborSets::from_lists(vec![vec![1, 2], vec![2], vec![0]]);
        let (ptr, pairs) = sel.incoming();
        assert_eq!(ptr, vec![0, 1, 2, 4]);
        assert_eq!(pairs, vec![3, 0, 1, 2]);
    }
}
