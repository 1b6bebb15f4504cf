//! Relative position measurement graph (RPMG).
//!
//! Nodes are vehicles and landmarks; an undirected edge joins two nodes when
//! a relative measurement between them is available, i.e. when they are
//! within sensor range and at least one of them is a vehicle. Landmarks never
//! connect to each other.
//!
//! Each vehicle gets its own Laplacian over itself and its one-hop
//! neighborhood (the induced subgraph), weighted by an exponential
//! adjacency that decays from 1 at `rho` to `e^-kappa` at the sensor range.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::sensing::range;
use crate::world::{Landmark, NodeId, VehicleState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjacencyParams {
    pub kappa: f64,
    pub rho: f64,
    pub rs: f64,
}

/// `exp(-kappa (d - rho) / (rs - rho))` inside range, 0 beyond it.
pub fn adjacency_weight(distance: f64, kappa: f64, rho: f64, rs: f64) -> Result<f64> {
    if !(rs > rho) {
        return Err(Error::InvalidArgument(format!(
            "sensor range {rs} must exceed rho {rho}"
        )));
    }
    if distance > rs {
        return Ok(0.0);
    }
    Ok((-kappa * (distance - rho) / (rs - rho)).exp())
}

impl AdjacencyParams {
    pub fn weight(&self, distance: f64) -> f64 {
        adjacency_weight(distance, self.kappa, self.rho, self.rs).unwrap_or(0.0)
    }

    /// d(weight)/d(distance) inside range.
    pub fn weight_slope(&self, distance: f64) -> f64 {
        if distance > self.rs {
            0.0
        } else {
            -self.kappa / (self.rs - self.rho) * self.weight(distance)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpmgNode {
    pub id: NodeId,
    pub position: [f64; 2],
}

/// Undirected edge between node indices `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct Rpmg {
    nodes: Vec<RpmgNode>,
    edges: Vec<Edge>,
    /// Edge indices incident to each node.
    incidence: Vec<Vec<usize>>,
    n_vehicles: usize,
    rs: f64,
}

/// Measurement graph with vehicle-vehicle edges.
pub fn build_rpmg(states: &[VehicleState], landmarks: &[Landmark], rs: f64) -> Rpmg {
    build_rpmg_with(states, landmarks, rs, true)
}

/// `vehicle_edges = false` drops vehicle-vehicle edges (non-cooperative team).
pub fn build_rpmg_with(
    states: &[VehicleState],
    landmarks: &[Landmark],
    rs: f64,
    vehicle_edges: bool,
) -> Rpmg {
    let positions: Vec<[f64; 2]> = states.iter().map(VehicleState::position).collect();
    let marks: Vec<[f64; 2]> = landmarks.iter().map(Landmark::position).collect();
    build_rpmg_from_positions(&positions, &marks, rs, vehicle_edges)
}

pub fn build_rpmg_from_positions(
    vehicles: &[[f64; 2]],
    landmarks: &[[f64; 2]],
    rs: f64,
    vehicle_edges: bool,
) -> Rpmg {
    let n_v = vehicles.len();
    let nodes: Vec<RpmgNode> = vehicles
        .iter()
        .enumerate()
        .map(|(i, &p)| RpmgNode {
            id: NodeId::Vehicle(i),
            position: p,
        })
        .chain(landmarks.iter().enumerate().map(|(j, &p)| RpmgNode {
            id: NodeId::Landmark(j),
            position: p,
        }))
        .collect();
    let mut edges = Vec::new();
    let mut incidence = vec![Vec::new(); nodes.len()];
    for a in 0..n_v {
        let start = if vehicle_edges { a + 1 } else { n_v };
        for b in start..nodes.len() {
            let d = range(nodes[a].position, nodes[b].position);
            if d <= rs {
                incidence[a].push(edges.len());
                incidence[b].push(edges.len());
                edges.push(Edge { a, b, distance: d });
            }
        }
    }
    Rpmg {
        nodes,
        edges,
        incidence,
        n_vehicles: n_v,
        rs,
    }
}

impl Rpmg {
    /// Graph from an explicit edge list, for abstract configurations where
    /// only edge lengths matter. Node positions are left at the origin.
    pub fn from_edges(n_vehicles: usize, n_landmarks: usize, edges: &[(NodeId, NodeId, f64)]) -> Result<Rpmg> {
        let nodes: Vec<RpmgNode> = (0..n_vehicles)
            .map(NodeId::Vehicle)
            .chain((0..n_landmarks).map(NodeId::Landmark))
            .map(|id| RpmgNode { id, position: [0.0, 0.0] })
            .collect();
        let mut g = Rpmg {
            incidence: vec![Vec::new(); nodes.len()],
            nodes,
            edges: Vec::new(),
            n_vehicles,
            rs: f64::INFINITY,
        };
        for &(p, q, distance) in edges {
            if p.is_landmark() && q.is_landmark() {
                return Err(Error::InvalidArgument(format!("landmark-landmark edge {p}-{q}")));
            }
            let (a, b) = (g.node_index(p)?, g.node_index(q)?);
            if a == b || g.edge_between(a, b).is_some() {
                return Err(Error::InvalidArgument(format!("bad or repeated edge {p}-{q}")));
            }
            let (a, b) = (a.min(b), a.max(b));
            g.incidence[a].push(g.edges.len());
            g.incidence[b].push(g.edges.len());
            g.edges.push(Edge { a, b, distance });
        }
        Ok(g)
    }

    pub fn nodes(&self) -> &[RpmgNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_vehicles(&self) -> usize {
        self.n_vehicles
    }

    pub fn n_landmarks(&self) -> usize {
        self.nodes.len() - self.n_vehicles
    }

    pub fn sensor_range(&self) -> f64 {
        self.rs
    }

    pub fn node_index(&self, id: NodeId) -> Result<usize> {
        let idx = match id {
            NodeId::Vehicle(i) if i < self.n_vehicles => i,
            NodeId::Landmark(j) if j < self.n_landmarks() => self.n_vehicles + j,
            _ => return Err(Error::UnknownNode(id.to_string())),
        };
        Ok(idx)
    }

    pub fn incident_edges(&self, node: usize) -> &[usize] {
        &self.incidence[node]
    }

    /// Node on the other end of edge `e` from `node`.
    pub fn other(&self, e: usize, node: usize) -> usize {
        let edge = &self.edges[e];
        if edge.a == node {
            edge.b
        } else {
            edge.a
        }
    }

    /// Neighbor node indices of `node`, sorted by node id.
    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.incidence[node].iter().map(|&e| self.other(e, node)).collect();
        out.sort_unstable();
        out
    }

    pub fn edge_between(&self, a: usize, b: usize) -> Option<usize> {
        self.incidence[a]
            .iter()
            .copied()
            .find(|&e| self.other(e, a) == b)
    }

    /// Whether some landmark is reachable from `vehicle`, relaying through
    /// vehicles only.
    pub fn reaches_landmark(&self, vehicle: usize) -> bool {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![vehicle];
        seen[vehicle] = true;
        while let Some(n) = stack.pop() {
            for &e in &self.incidence[n] {
                let m = self.other(e, n);
                if m >= self.n_vehicles {
                    return true;
                }
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        false
    }

    /// One line per edge: `node_a node_b distance weight`.
    pub fn dump(&self, params: &AdjacencyParams) -> String {
        let mut out = String::new();
        for e in &self.edges {
            out.push_str(&format!(
                "{} {} {} {}\n",
                self.nodes[e.a].id,
                self.nodes[e.b].id,
                e.distance,
                params.weight(e.distance)
            ));
        }
        out
    }
}

/// Laplacian of one vehicle's neighborhood. `nodes[0]` is the vehicle.
#[derive(Debug, Clone)]
pub struct VehicleLaplacian {
    pub nodes: Vec<usize>,
    pub matrix: DMatrix<f64>,
    /// Graph edge index behind each off-diagonal pair `(row, col)` with `row < col`.
    pub edges: Vec<(usize, usize, usize)>,
}

pub fn vehicle_laplacian(rpmg: &Rpmg, vehicle: usize, params: &AdjacencyParams) -> Result<VehicleLaplacian> {
    if vehicle >= rpmg.n_vehicles {
        return Err(Error::UnknownNode(format!("v{vehicle}")));
    }
    let mut nodes = vec![vehicle];
    nodes.extend(rpmg.neighbors(vehicle));
    let local: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(k, &n)| (n, k)).collect();
    let n = nodes.len();
    let mut matrix = DMatrix::zeros(n, n);
    let mut edges = Vec::new();
    for (r, &node) in nodes.iter().enumerate() {
        for &e in rpmg.incident_edges(node) {
            let other = rpmg.other(e, node);
            let Some(&c) = local.get(&other) else { continue };
            if c <= r {
                continue;
            }
            let w = params.weight(rpmg.edges[e].distance);
            matrix[(r, c)] -= w;
            matrix[(c, r)] -= w;
            matrix[(r, r)] += w;
            matrix[(c, c)] += w;
            edges.push((r, c, e));
        }
    }
    Ok(VehicleLaplacian { nodes, matrix, edges })
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{}x{} Laplacian", m.nrows(), m.ncols())));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "Laplacian asymmetric by {asym:e}"
        )));
    }
    Ok(())
}

/// Second-smallest eigenvalue; 0 for matrices smaller than 2x2.
pub fn lambda2(laplacian: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(laplacian)?;
    if laplacian.nrows() < 2 {
        return Ok(0.0);
    }
    let mut eig = SymmetricEigen::new(laplacian.clone()).eigenvalues.as_slice().to_vec();
    eig.sort_by(f64::total_cmp);
    Ok(eig[1])
}

/// Second-smallest eigenvalue and a unit eigenvector for it.
pub fn lambda2_with_vector(laplacian: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    check_symmetric(laplacian)?;
    let n = laplacian.nrows();
    if n < 2 {
        return Ok((0.0, DVector::zeros(n)));
    }
    let eig = SymmetricEigen::new(laplacian.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let k = order[1];
    Ok((eig.eigenvalues[k], eig.eigenvectors.column(k).into_owned()))
}

/// Simple path from a vehicle to a landmark.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub vertices: Vec<NodeId>,
    /// Graph edge indices, in traversal order.
    pub edges: Vec<usize>,
}

impl Path {
    pub fn hops(&self) -> usize {
        self.edges.len()
    }
}

impl std::fmt::Display for Path {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.vertices.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// All simple paths of at most `max_hops` edges from `vehicle` to
/// `landmark`, in lexicographic order of their vertex sequences. Landmarks
/// only appear as the final vertex: a landmark carries no state, so it cannot
/// relay information between two other nodes.
pub fn enumerate_paths(rpmg: &Rpmg, vehicle: NodeId, landmark: NodeId, max_hops: usize) -> Result<Vec<Path>> {
    if !vehicle.is_vehicle() || !landmark.is_landmark() {
        return Err(Error::InvalidArgument(format!(
            "paths run from a vehicle to a landmark, got {vehicle} -> {landmark}"
        )));
    }
    if max_hops == 0 {
        return Err(Error::InvalidArgument("max_hops must be >= 1".into()));
    }
    let start = rpmg.node_index(vehicle)?;
    let goal = rpmg.node_index(landmark)?;
    let mut out = Vec::new();
    let mut visited = vec![false; rpmg.nodes.len()];
    let mut verts = vec![start];
    let mut edges = Vec::new();
    visited[start] = true;
    dfs(rpmg, goal, max_hops, &mut visited, &mut verts, &mut edges, &mut out);
    Ok(out)
}

fn dfs(
    g: &Rpmg,
    goal: usize,
    max_hops: usize,
    visited: &mut [bool],
    verts: &mut Vec<usize>,
    edges: &mut Vec<usize>,
    out: &mut Vec<Path>,
) {
    let here = *verts.last().unwrap();
    if here == goal {
        out.push(Path {
            vertices: verts.iter().map(|&v| g.nodes[v].id).collect(),
            edges: edges.clone(),
        });
        return;
    }
    if edges.len() == max_hops {
        return;
    }
    // neighbors are sorted by node index, which matches NodeId order, so the
    // output comes out lexicographically sorted
    let mut next: Vec<(usize, usize)> = g.incidence[here].iter().map(|&e| (g.other(e, here), e)).collect();
    next.sort_unstable();
    for (n, e) in next {
        if visited[n] || (g.nodes[n].id.is_landmark() && n != goal) {
            continue;
        }
        visited[n] = true;
        verts.push(n);
        edges.push(e);
        dfs(g, goal, max_hops, visited, verts, edges, out);
        edges.pop();
        verts.pop();
        visited[n] = false;
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn veh(x: f64, y: f64) -> VehicleState {
        VehicleState::new(x, y, 0.0)
    }

    fn lm(j: u32, x: f64, y: f64) -> Landmark {
        Landmark { id: j, x, y }
    }

    const P: AdjacencyParams = AdjacencyParams { kappa: 5.0, rho: 0.5, rs: 50.0 };

    /// Five vehicles and three landmarks (a, b, c) laid out so that exactly
    /// seven measurements are in range:
    /// a-1, a-2, 1-2, 2-4, 3-4, 4-5, b-3. Landmark c is out of reach.
    pub(crate) fn five_three_layout() -> (Vec<VehicleState>, Vec<Landmark>) {
        let vehicles = vec![
            veh(0.0, 0.0),    // 1
            veh(40.0, 0.0),   // 2
            veh(125.0, 10.0), // 3
            veh(80.0, 10.0),  // 4
            veh(80.0, 55.0),  // 5
        ];
        let landmarks = vec![
            lm(0, 20.0, -30.0), // a
            lm(1, 165.0, 10.0), // b
            lm(2, 20.0, 120.0), // c
        ];
        (vehicles, landmarks)
    }

    #[test]
    fn adjacency_values() {
        assert_eq!(adjacency_weight(0.5, 5.0, 0.5, 50.0).unwrap(), 1.0);
        assert_eq!(adjacency_weight(50.0, 5.0, 0.5, 50.0).unwrap(), (-5.0f64).exp());
        assert_abs_diff_eq!(adjacency_weight(50.0, 5.0, 0.5, 50.0).unwrap(), 6.7379e-3, epsilon = 1e-7);
        assert_eq!(adjacency_weight(50.001, 5.0, 0.5, 50.0).unwrap(), 0.0);
        assert!(adjacency_weight(1.0, 5.0, 10.0, 10.0).is_err());
    }

    #[test]
    fn five_three_graph() {
        let (v, l) = five_three_layout();
        let g = build_rpmg(&v, &l, 50.0);
        assert_eq!(g.edges().len(), 7);
        let paths = enumerate_paths(&g, NodeId::Vehicle(4), NodeId::Landmark(0), 6).unwrap();
        let shown: Vec<String> = paths.iter().map(ToString::to_string).collect();
        // vehicles are 0-based here: 5-4-2-a is v4-v3-v1-l0
        assert!(shown.contains(&"v4-v3-v1-l0".to_string()), "{shown:?}");
    }

    #[test]
    fn edgeless_and_no_landmark_edges() {
        let g = build_rpmg(&[veh(0.0, 0.0), veh(200.0, 0.0)], &[lm(0, 100.0, 100.0)], 50.0);
        assert!(g.edges().is_empty());
        let g = build_rpmg(&[veh(0.0, 0.0)], &[lm(0, 100.0, 100.0), lm(1, 101.0, 100.0)], 50.0);
        assert!(g.edges().is_empty());
    }

    #[test]
    fn cooperation_off_drops_vehicle_edges() {
        let g = build_rpmg_with(&[veh(0.0, 0.0), veh(5.0, 0.0)], &[lm(0, 2.0, 2.0)], 50.0, false);
        assert_eq!(g.edges().len(), 2);
        assert!(g.edges().iter().all(|e| e.b >= 2));
    }

    #[test]
    fn laplacian_examples() {
        let g = build_rpmg(&[veh(0.0, 0.0)], &[], 50.0);
        let l = vehicle_laplacian(&g, 0, &P).unwrap();
        assert_eq!(l.matrix.shape(), (1, 1));
        assert_eq!(l.matrix[(0, 0)], 0.0);
        assert_eq!(lambda2(&l.matrix).unwrap(), 0.0);

        let g = build_rpmg(&[veh(0.0, 0.0)], &[lm(0, 10.0, 0.0)], 50.0);
        let w = P.weight(10.0);
        let l = vehicle_laplacian(&g, 0, &P).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[w, -w, -w, w]);
        assert_eq!(l.matrix, expect);
        assert_abs_diff_eq!(lambda2(&l.matrix).unwrap(), 2.0 * w, epsilon = 1e-12);

        let g = build_rpmg(&[veh(0.0, 0.0)], &[lm(0, 0.5, 0.0), lm(1, 0.0, 0.5)], 50.0);
        let l = vehicle_laplacian(&g, 0, &P).unwrap();
        for (k, d) in [2.0, 1.0, 1.0].into_iter().enumerate() {
            assert_abs_diff_eq!(l.matrix[(k, k)], d, epsilon = 1e-15);
        }
        assert_eq!(l.matrix[(1, 2)], 0.0);
        for r in 0..3 {
            assert_abs_diff_eq!(l.matrix.row(r).sum(), 0.0, epsilon = 1e-15);
        }
        assert!(vehicle_laplacian(&g, 3, &P).is_err());
    }

    #[test]
    fn lambda2_examples() {
        let w = 0.37;
        let two = DMatrix::from_row_slice(2, 2, &[w, -w, -w, w]);
        assert_abs_diff_eq!(lambda2(&two).unwrap(), 2.0 * w, epsilon = 1e-12);
        // two disjoint edges
        let mut split = DMatrix::zeros(4, 4);
        split.view_mut((0, 0), (2, 2)).copy_from(&two);
        split.view_mut((2, 2), (2, 2)).copy_from(&two);
        assert_abs_diff_eq!(lambda2(&split).unwrap(), 0.0, epsilon = 1e-12);
        let tri = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0]);
        assert_abs_diff_eq!(lambda2(&tri).unwrap(), 3.0, epsilon = 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -0.9, 1.0]);
        assert!(lambda2(&bad).is_err());
    }

    #[test]
    fn path_examples() {
        let g = build_rpmg(&[veh(0.0, 0.0)], &[lm(0, 10.0, 0.0)], 50.0);
        let p = enumerate_paths(&g, NodeId::Vehicle(0), NodeId::Landmark(0), 2).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].hops(), 1);

        let g = build_rpmg(&[veh(0.0, 0.0), veh(10.0, 0.0)], &[lm(0, 5.0, 5.0)], 50.0);
        let p = enumerate_paths(&g, NodeId::Vehicle(0), NodeId::Landmark(0), 3).unwrap();
        let shown: Vec<String> = p.iter().map(ToString::to_string).collect();
        // vehicles sort before landmarks
        assert_eq!(shown, vec!["v0-v1-l0", "v0-l0"]);

        let g = build_rpmg(&[veh(0.0, 0.0)], &[lm(0, 100.0, 0.0)], 50.0);
        assert!(enumerate_paths(&g, NodeId::Vehicle(0), NodeId::Landmark(0), 3).unwrap().is_empty());
        assert!(enumerate_paths(&g, NodeId::Vehicle(0), NodeId::Landmark(0), 0).is_err());
        assert!(enumerate_paths(&g, NodeId::Vehicle(2), NodeId::Landmark(0), 1).is_err());
    }

    #[test]
    fn dump_one_line_per_edge() {
        let (v, l) = five_three_layout();
        let g = build_rpmg(&v, &l, 50.0);
        let text = g.dump(&P);
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().all(|line| line.split_whitespace().count() == 4));
    }

    fn union_find_connected(n: usize, pairs: &[(usize, usize)]) -> bool {
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        for &(a, b) in pairs {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
        let root = find(&mut parent, 0);
        (0..n).all(|x| find(&mut parent, x) == root)
    }

    fn laplacian_from(n: usize, pairs: &[(usize, usize, f64)]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for &(a, b, w) in pairs {
            m[(a, b)] -= w;
            m[(b, a)] -= w;
            m[(a, a)] += w;
            m[(b, b)] += w;
        }
        m
    }

    /// Independent path count: DFS over vertex sets, no ordering concerns.
    fn brute_force_paths(g: &Rpmg, start: usize, goal: usize, max_hops: usize) -> BTreeSet<Vec<usize>> {
        let mut found = BTreeSet::new();
        let mut stack = vec![vec![start]];
        while let Some(p) = stack.pop() {
            let last = *p.last().unwrap();
            if last == goal {
                found.insert(p);
                continue;
            }
            if p.len() > max_hops {
                continue;
            }
            for e in g.edges() {
                let next = if e.a == last {
                    e.b
                } else if e.b == last {
                    e.a
                } else {
                    continue;
                };
                let relay_ok = next == goal || g.nodes()[next].id.is_vehicle();
                if relay_ok && !p.contains(&next) {
                    let mut q = p.clone();
                    q.push(next);
                    stack.push(q);
                }
            }
        }
        found
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn lambda2_positive_iff_connected(
            n in 2usize..7,
            raw in proptest::collection::vec((0usize..7, 0usize..7, 0.05f64..1.0), 0..14),
        ) {
            let pairs: Vec<(usize, usize, f64)> = raw
                .into_iter()
                .filter(|(a, b, _)| a < b && *b < n)
                .collect();
            let m = laplacian_from(n, &pairs);
            let l2 = lambda2(&m).unwrap();
            let simple: Vec<(usize, usize)> = pairs.iter().map(|p| (p.0, p.1)).collect();
            prop_assert_eq!(l2 > 1e-9, union_find_connected(n, &simple));
        }

        #[test]
        fn lambda2_monotone_under_edges(
            n in 3usize..7,
            raw in proptest::collection::vec((0usize..7, 0usize..7, 0.05f64..1.0), 1..12),
            extra in (0usize..7, 0usize..7, 0.01f64..1.0),
        ) {
            let pairs: Vec<(usize, usize, f64)> = raw.into_iter().filter(|(a, b, _)| a < b && *b < n).collect();
            let before = lambda2(&laplacian_from(n, &pairs)).unwrap();
            let (a, b, w) = extra;
            prop_assume!(a != b && a < n && b < n);
            let mut more = pairs.clone();
            more.push((a.min(b), a.max(b), w));
            let after = lambda2(&laplacian_from(n, &more)).unwrap();
            prop_assert!(after >= before - 1e-10, "{} -> {}", before, after);
        }

        #[test]
        fn adjacency_strictly_decreasing(d1 in 0.5f64..50.0, d2 in 0.5f64..50.0) {
            prop_assume!((d1 - d2).abs() > 1e-9);
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(P.weight(lo) > P.weight(hi));
            prop_assert!(P.weight(hi) > 0.0 && P.weight(lo) <= 1.0);
        }

        #[test]
        fn path_enumeration_matches_brute_force(
            pts in proptest::collection::vec((0.0f64..60.0, 0.0f64..60.0), 4..8),
            n_v in 1usize..5,
        ) {
            let n_v = n_v.min(pts.len() - 1);
            let vehicles: Vec<VehicleState> = pts[..n_v].iter().map(|&(x, y)| veh(x, y)).collect();
            let landmarks: Vec<Landmark> = pts[n_v..].iter().enumerate().map(|(j, &(x, y))| lm(j as u32, x, y)).collect();
            let g = build_rpmg(&vehicles, &landmarks, 40.0);
            for j in 0..landmarks.len() {
                let max_hops = n_v + 1;
                let got = enumerate_paths(&g, NodeId::Vehicle(0), NodeId::Landmark(j), max_hops).unwrap();
                let brute = brute_force_paths(&g, 0, n_v + j, max_hops);
                prop_assert_eq!(got.len(), brute.len());
                let mut sorted = got.clone();
                sorted.sort_by(|a, b| a.vertices.cmp(&b.vertices));
                prop_assert_eq!(sorted, got);
            }
        }
    }
}
