use crate::error::{Error, Result};

/// Fixed directed broadcast graph over nodes placed on a circle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub num_nodes: usize,
    pub p: usize,
    pub out_neighbors: Vec<Vec<usize>>,
    pub in_degree: Vec<usize>,
}

impl Topology {
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.out_neighbors[node]
    }
}

/// Each node broadcasts to its `p` nearest ids on the circle, taking offsets
/// `+1, -1, +2, -2, ...` in that order and skipping ids already chosen.
pub fn build_topology(num_nodes: usize, p: usize) -> Result<Topology> {
    if num_nodes == 0 {
        return Err(Error::invalid("a network needs at least one node"));
    }
    if p > num_nodes - 1 {
        return Err(Error::invalid(format!(
            "p = {p} exceeds the {} other nodes",
            num_nodes - 1
        )));
    }
    let n = num_nodes as i64;
    let mut out_neighbors = Vec::with_capacity(num_nodes);
    for i in 0..n {
        let mut chosen: Vec<usize> = Vec::with_capacity(p);
        let mut offset = 1;
        while chosen.len() < p {
            for o in [offset, -offset] {
                let j = (i + o).rem_euclid(n) as usize;
                if chosen.len() < p && j != i as usize && !chosen.contains(&j) {
                    chosen.push(j);
                }
            }
            offset += 1;
        }
        out_neighbors.push(chosen);
    }
    let mut in_degree = vec![0; num_nodes];
    for nb in &out_neighbors {
        for &j in nb {
            in_degree[j] += 1;
        }
    }
    Ok(Topology {
        num_nodes,
        p,
        out_neighbors,
        in_degree,
    })
}

/// Broadcast probability that balances expected inbox inflow against consumption.
pub fn equilibrium_broadcast_prob(p_c: f64, in_degree: usize) -> Result<f64> {
    if in_degree == 0 {
        return Err(Error::invalid("an isolated node has no equilibrium broadcast rate"));
    }
    Ok(p_c / in_degree as f64)
}
