//! Binary morphology and 8-connected component labelling.

use crate::raster::BinaryMask;

pub const NEIGHBORS8: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Component labels (0 = background, 1.. = component id) and the component count.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (w, h) = mask.dims();
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data()[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for (dx, dy) in NEIGHBORS8 {
                let (nx, ny) = (x + dx, y + dy);
                if mask.get_signed(nx, ny) {
                    let j = ny as usize * w + nx as usize;
                    if labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Pixel lists per component, in label order.
pub fn components(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let (labels, n) = label_components(mask);
    let w = mask.width();
    let mut out = vec![Vec::new(); n];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            out[l as usize - 1].push((i % w, i / w));
        }
    }
    out
}

pub fn component_count(mask: &BinaryMask) -> usize {
    label_components(mask).1
}

/// Keep the largest 8-connected component; ties go to the lowest label.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (labels, n) = label_components(mask);
    if n == 0 {
        return mask.clone();
    }
    let mut sizes = vec![0usize; n + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    let best = (1..=n).max_by_key(|&l| (sizes[l], std::cmp::Reverse(l))).unwrap() as u32;
    let data = labels.iter().map(|&l| l == best).collect();
    BinaryMask::from_vec(mask.width(), mask.height(), data).expect("same dims")
}

/// 3x3 dilation; pixels outside the frame count as background.
pub fn dilate3(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            return true;
        }
        NEIGHBORS8
            .iter()
            .any(|&(dx, dy)| mask.get_signed(x as i64 + dx, y as i64 + dy))
    })
}

/// 3x3 erosion; pixels outside the frame count as foreground so the frame edge does not erode.
pub fn erode3(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        NEIGHBORS8.iter().all(|&(dx, dy)| {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                true
            } else {
                mask.get(nx as usize, ny as usize)
            }
        })
    })
}

pub fn close3(mask: &BinaryMask) -> BinaryMask {
    erode3(&dilate3(mask))
}

/// Dilation by `radius` with a square structuring element.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    (0..radius).fold(mask.clone(), |m, _| dilate3(&m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pixels_are_one_component() {
        let m = BinaryMask::from_fn(5, 5, |x, y| x == y);
        assert_eq!(component_count(&m), 1);
        let m = BinaryMask::from_fn(5, 5, |x, y| (x == 0 && y == 0) || (x == 2 && y == 0));
        assert_eq!(component_count(&m), 2);
    }

    #[test]
    fn closing_fills_single_pixel_hole() {
        let mut m = BinaryMask::filled(7, 7, true);
        m.set(3, 3, false);
        assert_eq!(close3(&m), BinaryMask::filled(7, 7, true));
    }

    #[test]
    fn dilation_grows_by_one_ring() {
        let mut m = BinaryMask::new(5, 5);
        m.set(2, 2, true);
        assert_eq!(dilate3(&m).count(), 9);
        assert_eq!(dilate(&m, 2).count(), 25);
    }
}
