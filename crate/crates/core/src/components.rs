//! Connected-component labeling of binary 3D masks.

/// Labels foreground voxels (`mask[i] == true`) of a `dims` grid.
///
/// Returns per-voxel labels (`0` = background, components numbered from 1 in
/// raster order of their first voxel) and the size of each component.
pub fn label_components(mask: &[bool], dims: [usize; 3], full_connectivity: bool) -> (Vec<u32>, Vec<usize>) {
    let [d, h, w] = dims;
    assert_eq!(mask.len(), d * h * w);
    let offsets = neighbor_offsets(full_connectivity);
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[start] = label;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let z = (i / (h * w)) as isize;
            let y = ((i / w) % h) as isize;
            let x = (i % w) as isize;
            for &(dz, dy, dx) in &offsets {
                let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = (nz as usize * h + ny as usize) * w + nx as usize;
                if mask[j] && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// 26-neighborhood when `full`, else the 6 face neighbors.
fn neighbor_offsets(full: bool) -> Vec<(isize, isize, isize)> {
    let mut out = Vec::with_capacity(26);
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let manhattan = dz.abs() + dy.abs() + dx.abs();
                if manhattan == 0 || (!full && manhattan > 1) {
                    continue;
                }
                out.push((dz, dy, dx));
            }
        }
    }
    out
}
