//! Topology-aware training targets: short skeleton components and terminal branches are
//! pruned from the annotation skeleton, and the survivors are re-thickened by their radius.

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};

use crate::morph;
use crate::raster::BinaryMask;
use crate::skeleton::{skeletonize, NodeKind, SkeletonGraph};

pub const DEFAULT_MIN_PATH_PX: usize = 100;

/// Intermediate products of target generation, kept for inspection and testing.
#[derive(Debug, Clone)]
pub struct PrunedTargets {
    /// Skeleton of the source annotation.
    pub skeleton: SkeletonGraph,
    /// Surviving skeleton pixels.
    pub pruned: BinaryMask,
    /// Re-thickened target mask.
    pub mstar: BinaryMask,
}

/// Produce the pruned target mask for annotation `g`.
pub fn prune_targets(g: &BinaryMask, min_path_px: usize) -> BinaryMask {
    prune_targets_detailed(g, min_path_px).mstar
}

pub fn prune_targets_detailed(g: &BinaryMask, min_path_px: usize) -> PrunedTargets {
    let skeleton = skeletonize(g);
    let (w, h) = g.dims();

    let mut pruned = drop_short_components(&skeleton.mask, min_path_px);
    for px in terminal_branch_pixels(&skeleton, &pruned) {
        pruned.set(px.0, px.1, false);
    }
    // Components that lost their twigs may now be short themselves.
    let pruned = drop_short_components(&pruned, min_path_px);

    let mut mstar = BinaryMask::new(w, h);
    for (x, y) in pruned.iter_set() {
        stamp_disk(&mut mstar, x, y, skeleton.radius_at(x, y));
    }
    PrunedTargets {
        skeleton,
        pruned,
        mstar,
    }
}

fn drop_short_components(mask: &BinaryMask, min_px: usize) -> BinaryMask {
    let mut out = BinaryMask::new(mask.width(), mask.height());
    for comp in morph::components(mask) {
        if comp.len() >= min_px {
            for (x, y) in comp {
                out.set(x, y, true);
            }
        }
    }
    out
}

/// Pixels of terminal branches to delete from `kept`.
///
/// In every junction-bearing component the two endpoints farthest apart along the skeleton
/// keep their branches so the component's main path survives; all other endpoint-to-junction
/// branches go in one pass. Junction pixels are never deleted.
fn terminal_branch_pixels(skel: &SkeletonGraph, kept: &BinaryMask) -> Vec<(usize, usize)> {
    let w = skel.width();
    let (labels, n_comp) = morph::label_components(&skel.mask);
    let comp_of_node = |i: usize| {
        let (x, y) = skel.nodes[i].pixels[0];
        labels[y * w + x] as usize
    };

    let mut graph: UnGraph<usize, f64> = UnGraph::new_undirected();
    let ids: Vec<NodeIndex> = (0..skel.nodes.len()).map(|i| graph.add_node(i)).collect();
    for b in &skel.branches {
        if let (Some(s), Some(e)) = (b.start, b.end) {
            graph.add_edge(ids[s], ids[e], b.chain_length());
        }
    }

    let mut has_junction = vec![false; n_comp + 1];
    let mut endpoints: Vec<Vec<usize>> = vec![Vec::new(); n_comp + 1];
    for (i, node) in skel.nodes.iter().enumerate() {
        let c = comp_of_node(i);
        match node.kind {
            NodeKind::Junction => has_junction[c] = true,
            NodeKind::Endpoint => endpoints[c].push(i),
            NodeKind::Isolated => {}
        }
    }

    let mut protected = vec![false; skel.nodes.len()];
    for c in 1..=n_comp {
        if !has_junction[c] || endpoints[c].len() < 2 {
            continue;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for &a in &endpoints[c] {
            let dist = dijkstra(&graph, ids[a], None, |e| *e.weight());
            for &b in &endpoints[c] {
                if b <= a {
                    continue;
                }
                if let Some(&d) = dist.get(&ids[b]) {
                    if best.is_none_or(|(bd, _, _)| d > bd) {
                        best = Some((d, a, b));
                    }
                }
            }
        }
        if let Some((_, a, b)) = best {
            protected[a] = true;
            protected[b] = true;
        }
    }

    let mut out = Vec::new();
    for b in &skel.branches {
        if !b.is_terminal(&skel.nodes) {
            continue;
        }
        let tip = [b.start, b.end]
            .into_iter()
            .flatten()
            .find(|&n| skel.nodes[n].kind == NodeKind::Endpoint)
            .expect("terminal branch has an endpoint");
        if protected[tip] {
            continue;
        }
        for &(x, y) in &b.pixels {
            let is_junction = skel
                .node_at(x, y)
                .is_some_and(|n| skel.nodes[n].kind == NodeKind::Junction);
            if !is_junction && kept.get(x, y) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Set every pixel strictly closer than `radius` to (cx, cy), plus the centre. Since the
/// radius is the distance to the nearest background pixel, the disk stays inside the source.
fn stamp_disk(mask: &mut BinaryMask, cx: usize, cy: usize, radius: f64) {
    mask.set(cx, cy, true);
    if !radius.is_finite() {
        return;
    }
    let r = radius.ceil() as i64;
    // Radii are square roots of integer squared distances.
    let r2 = (radius * radius).round();
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cx as i64 + dx, cy as i64 + dy);
            if x < 0 || y < 0 || x >= mask.width() as i64 || y >= mask.height() as i64 {
                continue;
            }
            if ((dx * dx + dy * dy) as f64) < r2 {
                mask.set(x as usize, y as usize, true);
            }
        }
    }
}
