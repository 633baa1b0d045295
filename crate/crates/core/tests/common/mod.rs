#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vanetbench::routing::NodeId;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random spanning tree plus extra edges with probability `p`.
pub fn random_connected(rng: &mut ChaCha8Rng, n: u32, p: f64) -> Vec<(NodeId, NodeId)> {
    let mut edges = BTreeSet::new();
    for v in 1..n {
        let u = rng.random_range(0..v);
        edges.insert((u, v));
    }
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                edges.insert((a, b));
            }
        }
    }
    edges.into_iter().collect()
}

pub fn adjacency(n: u32, edges: &[(NodeId, NodeId)]) -> Vec<Vec<NodeId>> {
    let mut adj = vec![Vec::new(); n as usize];
    for &(a, b) in edges {
        adj[a as usize].push(b);
        adj[b as usize].push(a);
    }
    adj
}

pub fn bfs(n: u32, edges: &[(NodeId, NodeId)], src: NodeId) -> Vec<Option<u32>> {
    let adj = adjacency(n, edges);
    let mut dist = vec![None; n as usize];
    dist[src as usize] = Some(0);
    let mut q = VecDeque::from([src]);
    while let Some(u) = q.pop_front() {
        for &v in &adj[u as usize] {
            if dist[v as usize].is_none() {
                dist[v as usize] = Some(dist[u as usize].unwrap() + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

/// Every simple path from `a` to `b`, as node sequences.
pub fn simple_paths(n: u32, edges: &[(NodeId, NodeId)], a: NodeId, b: NodeId) -> Vec<Vec<NodeId>> {
    fn walk(adj: &[Vec<NodeId>], b: NodeId, path: &mut Vec<NodeId>, out: &mut Vec<Vec<NodeId>>) {
        let u = *path.last().unwrap();
        if u == b {
            out.push(path.clone());
            return;
        }
        for &v in &adj[u as usize] {
            if !path.contains(&v) {
                path.push(v);
                walk(adj, b, path, out);
                path.pop();
            }
        }
    }
    let adj = adjacency(n, edges);
    let mut out = Vec::new();
    walk(&adj, b, &mut vec![a], &mut out);
    out
}

pub fn links_of(path: &[NodeId]) -> BTreeSet<(NodeId, NodeId)> {
    path.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect()
}

/// Whether one candidate per slot can be chosen with pairwise link-disjoint paths.
pub fn disjoint_choice(slots: &[Vec<Vec<NodeId>>]) -> bool {
    fn go(slots: &[Vec<Vec<NodeId>>], used: &BTreeSet<(NodeId, NodeId)>) -> bool {
        let Some((first, rest)) = slots.split_first() else { return true };
        first.iter().any(|p| {
            let l = links_of(p);
            if l.is_disjoint(used) {
                let mut u = used.clone();
                u.extend(l);
                go(rest, &u)
            } else {
                false
            }
        })
    }
    go(slots, &BTreeSet::new())
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma Q(a, x), by the power series of P.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    for k in 1..10_000 {
        term *= x / (a + k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    1.0 - (a * x.ln() - x - ln_gamma(a) + sum.ln()).exp()
}

#[test]
fn gamma_oracle_known_values() {
    // Q(1, x) = e^-x and Q(0.5, x) = erfc(sqrt x).
    assert!((gamma_q(1.0, 2.0) - (-2.0f64).exp()).abs() < 1e-12);
    assert!((gamma_q(0.5, 1.0) - 0.157_299_207_050_285_1).abs() < 1e-12);
    assert!((gamma_q(0.75, 0.75) - 0.348_407_480_500_311).abs() < 1e-9);
}
