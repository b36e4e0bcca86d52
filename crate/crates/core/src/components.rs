//! Connected-component labelling of binary volumes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::volume::{linear_index, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face and edge neighbours.
    Eighteen,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Self::Six),
            18 => Some(Self::Eighteen),
            26 => Some(Self::TwentySix),
            _ => None,
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Self::Six => 6,
            Self::Eighteen => 18,
            Self::TwentySix => 26,
        }
    }

    /// Neighbour offsets, excluding the origin.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nonzero = (dx != 0) as u32 + (dy != 0) as u32 + (dz != 0) as u32;
                    let keep = match self {
                        Self::Six => nonzero == 1,
                        Self::Eighteen => (1..=2).contains(&nonzero),
                        Self::TwentySix => nonzero >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    /// True if two distinct voxels are adjacent under this connectivity.
    pub fn adjacent(self, a: [usize; 3], b: [usize; 3]) -> bool {
        let d: Vec<u64> = (0..3).map(|k| a[k].abs_diff(b[k]) as u64).collect();
        if d.iter().any(|&v| v > 1) {
            return false;
        }
        let nonzero = d.iter().filter(|&&v| v == 1).count();
        match self {
            Self::Six => nonzero == 1,
            Self::Eighteen => (1..=2).contains(&nonzero),
            Self::TwentySix => nonzero >= 1,
        }
    }
}

/// A maximal connected set of foreground voxels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Voxel indices in ascending linear order.
    pub voxels: Vec<[usize; 3]>,
    pub connectivity: Connectivity,
}

impl Component {
    pub fn new(voxels: Vec<[usize; 3]>, connectivity: Connectivity) -> Self {
        Self { voxels, connectivity }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

/// Foreground components (`> 0.5`), ordered by their smallest linear index.
pub fn connected_components(mask: &Volume3D, connectivity: Connectivity) -> Vec<Component> {
    let shape = mask.shape();
    let offsets = connectivity.offsets();
    let fg: Vec<bool> = mask.voxels().iter().map(|&v| Volume3D::is_foreground(v)).collect();
    let mut visited = vec![false; fg.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..fg.len() {
        if !fg[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(idx) = queue.pop_front() {
            members.push(idx);
            let x = (idx % shape[0]) as i64;
            let y = ((idx / shape[0]) % shape[1]) as i64;
            let z = (idx / (shape[0] * shape[1])) as i64;
            for o in &offsets {
                let (nx, ny, nz) = (x + o[0], y + o[1], z + o[2]);
                if nx < 0
                    || ny < 0
                    || nz < 0
                    || nx >= shape[0] as i64
                    || ny >= shape[1] as i64
                    || nz >= shape[2] as i64
                {
                    continue;
                }
                let n = linear_index(shape, nx as usize, ny as usize, nz as usize);
                if fg[n] && !visited[n] {
                    visited[n] = true;
                    queue.push_back(n);
                }
            }
        }
        members.sort_unstable();
        out.push(Component {
            voxels: members
                .into_iter()
                .map(|i| crate::volume::unravel(shape, i))
                .collect(),
            connectivity,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(shape: [usize; 3], on: &[[usize; 3]]) -> Volume3D {
        let mut v = vec![0.0f32; shape.iter().product()];
        for p in on {
            v[linear_index(shape, p[0], p[1], p[2])] = 1.0;
        }
        Volume3D::with_spacing(shape, [1.0; 3], [0.0; 3], v).unwrap()
    }

    #[test]
    fn offsets_have_expected_sizes() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }

    #[test]
    fn empty_mask_has_no_components() {
        assert!(connected_components(&mask([4, 4, 4], &[]), Connectivity::TwentySix).is_empty());
    }

    #[test]
    fn corner_touching_voxels() {
        let m = mask([3, 3, 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).len(), 1);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).len(), 2);
        assert_eq!(connected_components(&m, Connectivity::Six).len(), 2);
    }

    #[test]
    fn ordering_by_min_linear_index() {
        let m = mask([6, 1, 1], &[[4, 0, 0], [5, 0, 0], [0, 0, 0]]);
        let cc = connected_components(&m, Connectivity::Six);
        assert_eq!(cc.len(), 2);
        assert_eq!(cc[0].voxels, vec![[0, 0, 0]]);
        assert_eq!(cc[1].voxels, vec![[4, 0, 0], [5, 0, 0]]);
    }

    /// Union-find over all foreground pairs, independent of the BFS path.
    fn union_find_labels(shape: [usize; 3], fg: &[bool], conn: Connectivity) -> Vec<Vec<usize>> {
        fn find(p: &mut Vec<usize>, i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            let mut c = i;
            while p[c] != r {
                let n = p[c];
                p[c] = r;
                c = n;
            }
            r
        }
        let idx: Vec<usize> = (0..fg.len()).filter(|&i| fg[i]).collect();
        let mut parent: Vec<usize> = (0..fg.len()).collect();
        for (a_pos, &a) in idx.iter().enumerate() {
            for &b in &idx[a_pos + 1..] {
                let pa = crate::volume::unravel(shape, a);
                let pb = crate::volume::unravel(shape, b);
                if conn.adjacent(pa, pb) {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for &i in &idx {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.sort_by_key(|g| g[0]);
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_union_find(bits in proptest::collection::vec(proptest::bool::weighted(0.3), 512), c in 0usize..3) {
            let shape = [8, 8, 8];
            let conn = [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix][c];
            let vox: Vec<f32> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let m = Volume3D::with_spacing(shape, [1.0; 3], [0.0; 3], vox).unwrap();
            let got: Vec<Vec<usize>> = connected_components(&m, conn)
                .into_iter()
                .map(|c| c.voxels.iter().map(|v| linear_index(shape, v[0], v[1], v[2])).collect())
                .collect();
            let want = union_find_labels(shape, &bits, conn);
            prop_assert_eq!(&got, &want);
            // disjoint cover of the foreground
            let total: usize = got.iter().map(|g| g.len()).sum();
            prop_assert_eq!(total, bits.iter().filter(|&&b| b).count());
        }
    }
}
