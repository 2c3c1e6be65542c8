//! Thinning and skeleton graph analysis (junctions, endpoints, branches).

use crate::edt;
use crate::morph::{self, NEIGHBORS8};
use crate::raster::BinaryMask;

/// Clockwise neighbour ring starting north: N, NE, E, SE, S, SW, W, NW.
const RING: [(i64, i64); 8] = [
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

fn ring(mask: &BinaryMask, x: usize, y: usize) -> [bool; 8] {
    let mut r = [false; 8];
    for (k, (dx, dy)) in RING.iter().enumerate() {
        r[k] = mask.get_signed(x as i64 + dx, y as i64 + dy);
    }
    r
}

/// A foreground pixel is simple (8-connected foreground, 4-connected background) when its
/// removal changes neither the number of foreground components nor background components
/// in its neighbourhood.
fn is_simple(r: &[bool; 8]) -> bool {
    // 8-components of foreground in the ring.
    let fg_components = {
        let mut seen = [false; 8];
        let mut count = 0;
        for start in 0..8 {
            if !r[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(k) = stack.pop() {
                for j in 0..8 {
                    if r[j] && !seen[j] && ring_adjacent8(k, j) {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    };
    if fg_components != 1 {
        return false;
    }
    // 4-components of background that touch an edge-neighbour (even ring index).
    let mut seen = [false; 8];
    let mut count = 0;
    for start in (0..8).step_by(2) {
        if r[start] || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(k) = stack.pop() {
            for j in [(k + 1) % 8, (k + 7) % 8] {
                if !r[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count == 1
}

/// 8-adjacency between two ring positions (as pixels around a common centre).
fn ring_adjacent8(a: usize, b: usize) -> bool {
    let (ax, ay) = RING[a];
    let (bx, by) = RING[b];
    (ax - bx).abs() <= 1 && (ay - by).abs() <= 1
}

/// Directional border thinning: each round peels north, south, east and west border pixels
/// that are simple and not endpoints, then staircase corners are removed so the result is
/// 1 px wide under 8-connectivity. No component is ever split or deleted.
pub fn thin(mask: &BinaryMask) -> BinaryMask {
    let mut img = mask.clone();
    let (w, h) = img.dims();
    let mut candidates = Vec::new();
    loop {
        let mut changed = false;
        // Ring indices of N, S, E, W.
        for side in [0usize, 4, 2, 6] {
            candidates.clear();
            for y in 0..h {
                for x in 0..w {
                    if img.get(x, y) {
                        let r = ring(&img, x, y);
                        if !r[side] && peelable(&r) {
                            candidates.push((x, y));
                        }
                    }
                }
            }
            // Endpoint status is judged at the start of the subiteration; simplicity is
            // rechecked per deletion.
            for &(x, y) in &candidates {
                if is_simple(&ring(&img, x, y)) {
                    img.set(x, y, false);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    remove_staircases(&mut img);
    img
}

fn peelable(r: &[bool; 8]) -> bool {
    r.iter().filter(|&&v| v).count() >= 2 && is_simple(r)
}

/// Delete simple, non-endpoint pixels that sit on the corner of two edge-neighbours.
fn remove_staircases(img: &mut BinaryMask) {
    let (w, h) = img.dims();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if !img.get(x, y) {
                    continue;
                }
                let r = ring(img, x, y);
                let b = r.iter().filter(|&&v| v).count();
                if b < 2 {
                    continue;
                }
                let [n, _, e, _, s, _, wst, _] = r;
                let corner = (n && e) || (e && s) || (s && wst) || (wst && n);
                if corner && is_simple(&r) {
                    img.set(x, y, false);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

pub type Pixel = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Cluster of 8-adjacent pixels with degree >= 3.
    Junction,
    /// Degree-1 pixel.
    Endpoint,
    /// Degree-0 pixel.
    Isolated,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub pixels: Vec<Pixel>,
}

/// Simple pixel path between two nodes (or a closed loop).
#[derive(Debug, Clone)]
pub struct Branch {
    /// Ordered path. Junction end pixels are included; endpoint pixels are the path ends.
    pub pixels: Vec<Pixel>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub closed: bool,
}

impl Branch {
    /// Euclidean chain length (1 per axial step, sqrt 2 per diagonal step).
    pub fn chain_length(&self) -> f64 {
        chain_length(&self.pixels)
    }

    /// True for endpoint-to-junction branches.
    pub fn is_terminal(&self, nodes: &[Node]) -> bool {
        let kind = |n: Option<usize>| n.map(|i| nodes[i].kind);
        matches!(
            (kind(self.start), kind(self.end)),
            (Some(NodeKind::Endpoint), Some(NodeKind::Junction))
                | (Some(NodeKind::Junction), Some(NodeKind::Endpoint))
        )
    }
}

pub fn chain_length(path: &[Pixel]) -> f64 {
    path.windows(2)
        .map(|w| {
            let dx = w[0].0.abs_diff(w[1].0) as f64;
            let dy = w[0].1.abs_diff(w[1].1) as f64;
            dx.hypot(dy)
        })
        .sum()
}

/// 1-px-wide skeleton with per-pixel degree, nodes, branches and source-mask radius.
#[derive(Debug, Clone)]
pub struct SkeletonGraph {
    pub mask: BinaryMask,
    pub degree: Vec<u8>,
    pub radius: Vec<f64>,
    pub nodes: Vec<Node>,
    pub branches: Vec<Branch>,
    /// Node index per pixel, `u32::MAX` when the pixel is not part of a node.
    node_of: Vec<u32>,
}

impl SkeletonGraph {
    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.count()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn degree_at(&self, x: usize, y: usize) -> u8 {
        self.degree[y * self.width() + x]
    }

    pub fn radius_at(&self, x: usize, y: usize) -> f64 {
        self.radius[y * self.width() + x]
    }

    pub fn node_at(&self, x: usize, y: usize) -> Option<usize> {
        let v = self.node_of[y * self.width() + x];
        (v != u32::MAX).then_some(v as usize)
    }

    pub fn junctions(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Junction)
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Endpoint)
    }

    pub fn junction_count(&self) -> usize {
        self.junctions().count()
    }

    pub fn endpoint_count(&self) -> usize {
        self.endpoints().count()
    }

    /// Build the graph view of an existing 1-px skeleton.
    pub fn from_skeleton(skeleton: BinaryMask, radius: Vec<f64>) -> Self {
        let (w, h) = skeleton.dims();
        let degree = degrees(&skeleton);
        let mut node_of = vec![u32::MAX; w * h];
        let mut nodes = Vec::new();

        let junction_px = BinaryMask::from_fn(w, h, |x, y| {
            skeleton.get(x, y) && degree[y * w + x] >= 3
        });
        for cluster in morph::components(&junction_px) {
            let id = nodes.len() as u32;
            for &(x, y) in &cluster {
                node_of[y * w + x] = id;
            }
            nodes.push(Node {
                kind: NodeKind::Junction,
                pixels: cluster,
            });
        }
        for (x, y) in skeleton.iter_set() {
            let kind = match degree[y * w + x] {
                0 => NodeKind::Isolated,
                1 => NodeKind::Endpoint,
                _ => continue,
            };
            node_of[y * w + x] = nodes.len() as u32;
            nodes.push(Node {
                kind,
                pixels: vec![(x, y)],
            });
        }

        // Branches are the components of non-junction skeleton pixels.
        let path_px = skeleton.and_not(&junction_px);
        let mut branches = Vec::new();
        for comp in morph::components(&path_px) {
            if comp.len() == 1 && degree[comp[0].1 * w + comp[0].0] == 0 {
                continue;
            }
            branches.push(trace_branch(&comp, &path_px, &junction_px, &node_of, w));
        }

        Self {
            mask: skeleton,
            degree,
            radius,
            nodes,
            branches,
            node_of,
        }
    }
}

fn neighbours_in(mask: &BinaryMask, (x, y): Pixel) -> impl Iterator<Item = Pixel> + '_ {
    NEIGHBORS8.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
        mask.get_signed(nx, ny).then_some((nx as usize, ny as usize))
    })
}

/// Junction pixel adjacent to `p`, preferring edge-neighbours.
fn adjacent_junction(junctions: &BinaryMask, p: Pixel) -> Option<Pixel> {
    let mut best: Option<(usize, Pixel)> = None;
    for q in neighbours_in(junctions, p) {
        let rank = p.0.abs_diff(q.0) + p.1.abs_diff(q.1);
        if best.is_none_or(|(r, _)| rank < r) {
            best = Some((rank, q));
        }
    }
    best.map(|(_, q)| q)
}

fn trace_branch(
    comp: &[Pixel],
    path_px: &BinaryMask,
    junctions: &BinaryMask,
    node_of: &[u32],
    w: usize,
) -> Branch {
    let in_comp_neighbours = |p: Pixel| neighbours_in(path_px, p).count();
    let start = comp.iter().copied().find(|&p| in_comp_neighbours(p) <= 1);
    let closed_loop = start.is_none();
    let start = start.unwrap_or(comp[0]);

    let mut ordered = Vec::with_capacity(comp.len());
    let mut visited = std::collections::HashSet::with_capacity(comp.len());
    let mut cur = start;
    loop {
        ordered.push(cur);
        visited.insert(cur);
        let next = neighbours_in(path_px, cur)
            .filter(|q| !visited.contains(q))
            .min_by_key(|q| cur.0.abs_diff(q.0) + cur.1.abs_diff(q.1));
        match next {
            Some(q) => cur = q,
            None => break,
        }
    }

    let head_j = adjacent_junction(junctions, ordered[0]);
    let tail_j = if ordered.len() > 1 || head_j.is_none() {
        adjacent_junction(junctions, *ordered.last().unwrap())
            .filter(|&q| ordered.len() > 1 || Some(q) != head_j)
    } else {
        // Single-pixel bridge between two junction pixels.
        neighbours_in(junctions, ordered[0]).find(|&q| Some(q) != head_j)
    };

    let closed = closed_loop && head_j.is_none();
    let node_at = |p: Pixel| {
        let v = node_of[p.1 * w + p.0];
        (v != u32::MAX).then_some(v as usize)
    };
    let mut pixels = Vec::with_capacity(ordered.len() + 2);
    if let Some(j) = head_j {
        pixels.push(j);
    }
    pixels.extend_from_slice(&ordered);
    if let Some(j) = tail_j {
        pixels.push(j);
    }
    let (start_node, end_node) = if closed {
        (None, None)
    } else {
        (node_at(pixels[0]), node_at(*pixels.last().unwrap()))
    };
    Branch {
        pixels,
        start: start_node,
        end: end_node,
        closed,
    }
}

/// 8-neighbour count of each skeleton pixel (0 for background).
pub fn degrees(mask: &BinaryMask) -> Vec<u8> {
    let (w, h) = mask.dims();
    let mut out = vec![0u8; w * h];
    for (x, y) in mask.iter_set() {
        out[y * w + x] = neighbours_in(mask, (x, y)).count() as u8;
    }
    out
}

/// Thin `mask` and attach the Euclidean distance-to-background of the source mask as radius.
/// An empty mask yields an empty graph.
pub fn skeletonize(mask: &BinaryMask) -> SkeletonGraph {
    let skeleton = thin(mask);
    let dist = edt::distance_to_background(mask);
    let w = mask.width();
    let mut radius = vec![0.0; dist.len()];
    for (x, y) in skeleton.iter_set() {
        let d = dist[y * w + x];
        radius[y * w + x] = if d.is_finite() { d } else { (mask.width().max(mask.height())) as f64 };
    }
    SkeletonGraph::from_skeleton(skeleton, radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn has_full_2x2(m: &BinaryMask) -> bool {
        let (w, h) = m.dims();
        (0..h.saturating_sub(1)).any(|y| {
            (0..w - 1).any(|x| m.get(x, y) && m.get(x + 1, y) && m.get(x, y + 1) && m.get(x + 1, y + 1))
        })
    }

    fn plus(size: usize, half_width: usize) -> BinaryMask {
        let c = size / 2;
        BinaryMask::from_fn(size, size, |x, y| {
            (x.abs_diff(c) <= half_width && (4..size - 4).contains(&y))
                || (y.abs_diff(c) <= half_width && (4..size - 4).contains(&x))
        })
    }

    #[test]
    fn bar_thins_to_single_path() {
        let bar = BinaryMask::from_fn(110, 15, |x, y| (5..105).contains(&x) && (5..10).contains(&y));
        let g = skeletonize(&bar);
        assert_eq!(morph::component_count(&g.mask), 1);
        assert_eq!(g.junction_count(), 0);
        assert_eq!(g.endpoint_count(), 2);
        assert_eq!(g.branches.len(), 1);
        let len = g.branches[0].pixels.len();
        assert!((98..=102).contains(&len), "skeleton length {len}");
        for (x, y) in g.mask.iter_set() {
            assert_eq!(y, 7, "pixel ({x},{y}) off the centre line");
            if (8..102).contains(&x) {
                assert_eq!(g.radius_at(x, y), 3.0);
            }
        }
    }

    #[test]
    fn disk_collapses_to_a_few_pixels() {
        let disk = BinaryMask::from_fn(41, 41, |x, y| {
            (x as f64 - 20.0).powi(2) + (y as f64 - 20.0).powi(2) <= 15.0 * 15.0
        });
        let g = skeletonize(&disk);
        assert!(g.pixel_count() >= 1 && g.pixel_count() <= 5, "{} px", g.pixel_count());
        for (x, y) in g.mask.iter_set() {
            assert!(x.abs_diff(20) <= 2 && y.abs_diff(20) <= 2);
        }
    }

    #[test]
    fn plus_has_one_junction_four_endpoints() {
        for hw in [0, 1, 2] {
            let g = skeletonize(&plus(41, hw));
            assert_eq!(g.junction_count(), 1, "half width {hw}");
            assert_eq!(g.endpoint_count(), 4, "half width {hw}");
            assert_eq!(g.branches.len(), 4);
            for b in &g.branches {
                assert!(b.is_terminal(&g.nodes));
            }
        }
    }

    #[test]
    fn empty_mask_gives_empty_graph() {
        let g = skeletonize(&BinaryMask::new(10, 10));
        assert!(g.is_empty());
        assert!(g.nodes.is_empty());
        assert!(g.branches.is_empty());
    }

    #[test]
    fn square_block_does_not_vanish() {
        let m = BinaryMask::from_fn(6, 6, |x, y| (2..4).contains(&x) && (2..4).contains(&y));
        let t = thin(&m);
        assert!(!t.is_empty());
        assert!(!has_full_2x2(&t));
    }

    #[test]
    fn closed_ring_is_a_loop_branch() {
        let ring = BinaryMask::from_fn(30, 30, |x, y| {
            let d = ((x as f64 - 15.0).powi(2) + (y as f64 - 15.0).powi(2)).sqrt();
            (8.0..11.0).contains(&d)
        });
        let g = skeletonize(&ring);
        assert_eq!(g.nodes.len(), 0);
        assert_eq!(g.branches.len(), 1);
        assert!(g.branches[0].closed);
    }

    #[test]
    fn diagonal_chain_length() {
        let path = vec![(0, 0), (1, 1), (2, 1), (3, 2)];
        let l = chain_length(&path);
        assert!((l - (1.0 + 2.0 * std::f64::consts::SQRT_2)).abs() < 1e-12);
    }

    fn blob_mask() -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec((2usize..30, 2usize..30, 1usize..5), 1..6).prop_map(|disks| {
            BinaryMask::from_fn(32, 32, |x, y| {
                disks.iter().any(|&(cx, cy, r)| {
                    let dx = x as i64 - cx as i64;
                    let dy = y as i64 - cy as i64;
                    dx * dx + dy * dy <= (r * r) as i64
                })
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn thinning_invariants(mask in blob_mask()) {
            let g = skeletonize(&mask);
            prop_assert!(g.mask.is_subset_of(&mask));
            prop_assert_eq!(morph::component_count(&g.mask), morph::component_count(&mask));
            prop_assert!(!has_full_2x2(&g.mask));

            // Branch interiors have degree 2; union of branches and nodes covers the skeleton.
            let mut covered = BinaryMask::new(32, 32);
            for n in &g.nodes {
                for &(x, y) in &n.pixels { covered.set(x, y, true); }
            }
            for b in &g.branches {
                for &(x, y) in &b.pixels { covered.set(x, y, true); }
                let interior = if b.closed { &b.pixels[..] } else { &b.pixels[1..b.pixels.len() - 1] };
                for &(x, y) in interior {
                    if g.node_at(x, y).is_none() {
                        prop_assert_eq!(g.degree_at(x, y), 2);
                    }
                }
                if !b.closed {
                    let (a, z) = (b.pixels[0], *b.pixels.last().unwrap());
                    prop_assert!(g.node_at(a.0, a.1).is_some() || b.pixels.len() == 1);
                    prop_assert!(g.node_at(z.0, z.1).is_some() || b.pixels.len() == 1);
                }
            }
            prop_assert_eq!(covered, g.mask.clone());
        }
    }
}
