//! Similarity hypergraphs over a spot neighborhood and hypergraph convolution.
//!
//! Every node seeds one hyperedge made of itself and its `τ_deg - 1` most
//! cosine-similar peers, so the incidence matrix is square (`V` nodes by `V`
//! hyperedges) with a unit diagonal.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, glorot_uniform, join_path, relu, Leaves, Matrix};
use crate::scalar::Scalar;

/// Binary node × hyperedge membership.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Incidence {
    nodes: usize,
    edges: usize,
    member: Vec<bool>,
}

impl Incidence {
    pub fn from_edges(nodes: usize, edges: &[Vec<usize>]) -> Result<Self> {
        let mut member = vec![false; nodes * edges.len()];
        for (e, edge) in edges.iter().enumerate() {
            for &v in edge {
                if v >= nodes {
                    return Err(Error::invalid(format!("hyperedge {e} names node {v} of {nodes}")));
                }
                member[v * edges.len() + e] = true;
            }
        }
        Ok(Self {
            nodes,
            edges: edges.len(),
            member,
        })
    }

    pub fn identity(nodes: usize) -> Self {
        let edges: Vec<Vec<usize>> = (0..nodes).map(|v| vec![v]).collect();
        Self::from_edges(nodes, &edges).expect("indices in range")
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> usize {
        self.edges
    }

    pub fn contains(&self, node: usize, edge: usize) -> bool {
        self.member[node * self.edges + edge]
    }

    /// Sorted node indices of hyperedge `edge`.
    pub fn edge_members(&self, edge: usize) -> Vec<usize> {
        (0..self.nodes).filter(|&v| self.contains(v, edge)).collect()
    }

    pub fn node_degrees(&self) -> Vec<usize> {
        (0..self.nodes)
            .map(|v| (0..self.edges).filter(|&e| self.contains(v, e)).count())
            .collect()
    }

    pub fn edge_degrees(&self) -> Vec<usize> {
        (0..self.edges)
            .map(|e| (0..self.nodes).filter(|&v| self.contains(v, e)).count())
            .collect()
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let data = self
            .member
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Matrix::from_vec(self.nodes, self.edges, data).expect("sized by construction")
    }

    /// Same hypergraph with nodes and seeded edges relabelled so that new
    /// index `i` is old index `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.nodes);
        assert_eq!(self.nodes, self.edges, "permutation needs a square incidence");
        let n = self.nodes;
        let mut member = vec![false; n * n];
        for v in 0..n {
            for e in 0..n {
                member[v * n + e] = self.contains(perm[v], perm[e]);
            }
        }
        Self {
            nodes: n,
            edges: n,
            member,
        }
    }

    /// `Dv^{-1/2} H De^{-1} Hᵀ Dv^{-1/2}` with unit hyperedge weights.
    pub fn propagation<T: Scalar>(&self) -> Result<Matrix<T>> {
        let dv = self.node_degrees();
        let de = self.edge_degrees();
        if let Some(v) = dv.iter().position(|&d| d == 0) {
            return Err(Error::invalid(format!("node {v} belongs to no hyperedge")));
        }
        if let Some(e) = de.iter().position(|&d| d == 0) {
            return Err(Error::invalid(format!("hyperedge {e} is empty")));
        }
        let n = self.nodes;
        let mut g = Matrix::zeros(n, n);
        for (e, &d) in de.iter().enumerate() {
            let members = self.edge_members(e);
            let w = T::one() / T::of(d as f64);
            for &u in &members {
                for &v in &members {
                    g[(u, v)] += w;
                }
            }
        }
        let inv_sqrt: Vec<T> = dv.iter().map(|&d| T::one() / T::of(d as f64).sqrt()).collect();
        for u in 0..n {
            for v in 0..n {
                g[(u, v)] *= inv_sqrt[u] * inv_sqrt[v];
            }
        }
        Ok(g)
    }
}

/// Builds one hyperedge per node: the seed plus its `tau_deg - 1` most
/// cosine-similar other nodes, ties broken by lower index.
pub fn build_hyperedges<T: Scalar>(x: &Matrix<T>, tau_deg: usize) -> Result<Incidence> {
    let v = x.rows();
    if tau_deg == 0 || tau_deg > v {
        return Err(Error::invalid(format!(
            "hyperedge degree {tau_deg} needs 1 ≤ τ_deg ≤ {v} nodes"
        )));
    }
    let mut edges = Vec::with_capacity(v);
    for j in 0..v {
        let mut others: Vec<(T, usize)> = (0..v)
            .filter(|&k| k != j)
            .map(|k| (cosine_sim(x.row(j), x.row(k)), k))
            .collect();
        others.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let mut edge = vec![j];
        edge.extend(others.iter().take(tau_deg - 1).map(|&(_, k)| k));
        edges.push(edge);
    }
    Incidence::from_edges(v, &edges)
}

/// Node features paired with their similarity hypergraph.
#[derive(Clone, Debug)]
pub struct HyperGraph<T> {
    pub features: Matrix<T>,
    pub incidence: Incidence,
    pub node_degree: Vec<usize>,
    pub edge_degree: Vec<usize>,
    propagation: Matrix<T>,
}

impl<T: Scalar> HyperGraph<T> {
    pub fn build(features: Matrix<T>, tau_deg: usize) -> Result<Self> {
        let incidence = build_hyperedges(&features, tau_deg)?;
        Self::with_incidence(features, incidence)
    }

    pub fn with_incidence(features: Matrix<T>, incidence: Incidence) -> Result<Self> {
        if incidence.nodes() != features.rows() {
            return Err(Error::shape(
                "HyperGraph",
                format!("{} feature rows for {} nodes", features.rows(), incidence.nodes()),
            ));
        }
        let propagation = incidence.propagation()?;
        Ok(Self {
            node_degree: incidence.node_degrees(),
            edge_degree: incidence.edge_degrees(),
            features,
            incidence,
            propagation,
        })
    }

    pub fn nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn propagation(&self) -> &Matrix<T> {
        &self.propagation
    }
}

/// One convolution: `act(G · X · Θ)`, where `act` is ReLU except on the last
/// layer.
pub fn hgnn_layer<T: Scalar>(h: &Incidence, x: &Matrix<T>, theta: &Matrix<T>, last: bool) -> Result<Matrix<T>> {
    if x.rows() != h.nodes() || x.cols() != theta.rows() {
        return Err(Error::shape(
            "hgnn_layer",
            format!("X {:?}, Θ {:?}, {} nodes", x.shape(), theta.shape(), h.nodes()),
        ));
    }
    let g = h.propagation()?;
    let out = g.dot(x).dot(theta);
    Ok(if last { out } else { out.map(relu) })
}

#[derive(Clone, Debug)]
pub struct HgnnCache<T> {
    /// `G · X_{ℓ-1}` per layer.
    propagated: Vec<Matrix<T>>,
    /// Pre-activation `G · X_{ℓ-1} · Θ_ℓ` per layer.
    pre: Vec<Matrix<T>>,
    propagation: Matrix<T>,
    nodes: usize,
}

/// Layer weights of one hypergraph network, followed by mean pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct HgnnParams<T> {
    pub thetas: Vec<Matrix<T>>,
}

impl<T: Scalar> HgnnParams<T> {
    /// `layers` square `width × width` weights.
    pub fn init<R: Rng + ?Sized>(layers: usize, width: usize, rng: &mut R) -> Result<Self> {
        if layers == 0 {
            return Err(Error::invalid("hypergraph network needs at least one layer"));
        }
        Ok(Self {
            thetas: (0..layers).map(|_| glorot_uniform(width, width, rng)).collect(),
        })
    }

    pub fn layers(&self) -> usize {
        self.thetas.len()
    }

    fn check(&self, x: &Matrix<T>) -> Result<()> {
        let mut width = x.cols();
        for (l, t) in self.thetas.iter().enumerate() {
            if t.rows() != width {
                return Err(Error::shape(
                    "hgnn_forward",
                    format!("layer {l} expects width {} but receives {width}", t.rows()),
                ));
            }
            width = t.cols();
        }
        Ok(())
    }

    pub fn forward(&self, graph: &HyperGraph<T>) -> Result<Vec<T>> {
        Ok(self.forward_cached(graph.propagation(), &graph.features)?.0)
    }

    /// Runs every layer on features `x` under propagation matrix `g` and
    /// mean-pools the node rows.
    pub fn forward_cached(&self, g: &Matrix<T>, x: &Matrix<T>) -> Result<(Vec<T>, HgnnCache<T>)> {
        self.check(x)?;
        if self.thetas.is_empty() {
            return Err(Error::invalid("hypergraph network has no layers"));
        }
        let last = self.thetas.len() - 1;
        let mut propagated = Vec::with_capacity(self.thetas.len());
        let mut pre = Vec::with_capacity(self.thetas.len());
        let mut h = x.clone();
        for (l, theta) in self.thetas.iter().enumerate() {
            let gx = g.dot(&h);
            let a = gx.dot(theta);
            h = if l == last { a.clone() } else { a.map(relu) };
            propagated.push(gx);
            pre.push(a);
        }
        Ok((
            h.col_means(),
            HgnnCache {
                propagated,
                pre,
                propagation: g.clone(),
                nodes: x.rows(),
            },
        ))
    }

    /// Accumulates layer gradients and returns the gradient with respect to
    /// the input node features.
    pub fn backward(&self, cache: &HgnnCache<T>, d_pooled: &[T], grads: &mut Self) -> Matrix<T> {
        let inv_v = T::one() / T::of(cache.nodes as f64);
        let width = d_pooled.len();
        let mut d_h = Matrix::zeros(cache.nodes, width);
        for r in 0..cache.nodes {
            for (o, &d) in d_h.row_mut(r).iter_mut().zip(d_pooled) {
                *o = d * inv_v;
            }
        }
        let last = self.thetas.len() - 1;
        for l in (0..self.thetas.len()).rev() {
            let mut d_a = d_h;
            if l != last {
                for (d, &p) in d_a.as_mut_slice().iter_mut().zip(cache.pre[l].as_slice()) {
                    if p <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            grads.thetas[l].add_assign(&cache.propagated[l].t_dot(&d_a));
            // G is symmetric, so Gᵀ·(dA·Θᵀ) = G·(dA·Θᵀ).
            d_h = cache.propagation.dot(&d_a.dot_t(&self.thetas[l]));
        }
        d_h
    }
}

/// Pooled embedding of `graph` under `params`.
pub fn hgnn_forward<T: Scalar>(params: &HgnnParams<T>, graph: &HyperGraph<T>) -> Result<Vec<T>> {
    params.forward(graph)
}

impl<T: Scalar> Leaves<T> for HgnnParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<T>)) {
        for (l, t) in self.thetas.iter().enumerate() {
            f(join_path(prefix, &format!("theta{l}")), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        for (l, t) in self.thetas.iter_mut().enumerate() {
            f(join_path(prefix, &format!("theta{l}")), t);
        }
    }
}
