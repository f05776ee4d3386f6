//! Multi-head graph attention over the dependency neighbor structure.
//!
//! For head `k`, node `i` attends over its neighbors `j ∈ n[i]` with
//!
//! ```text
//! α_ij = softmax_j( LeakyReLU( a_k · [W_k h_i ‖ W_k h_j] ) )
//! g_i  = ‖_k ELU( Σ_j α_ij W_k h_j )
//! ```
//!
//! Non-neighbors get exactly zero weight. In train mode dropout is applied to
//! the input features and to the normalized coefficients.

use ndarray::Array2;

use crate::depgraph::AdjacencyMatrix;
use crate::encoder::TokenFeatures;
use crate::error::{Error, Result};
use crate::params::{rng_for, xavier, ParamId, ParamStore};
use crate::tape::{Mode, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct GatConfig {
    pub k_heads: usize,
    pub d_in: usize,
    /// Width after concatenating all heads.
    pub d_out_total: usize,
    pub dropout_rate: f64,
    pub layers: usize,
    pub seed: u64,
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_heads == 0 || self.d_in == 0 || self.d_out_total == 0 || self.layers == 0 {
            return Err(Error::Config("GAT dimensions, heads and layers must be positive".into()));
        }
        if self.d_out_total % self.k_heads != 0 {
            return Err(Error::Config(format!(
                "GAT output width {} is not divisible by {} heads",
                self.d_out_total, self.k_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("GAT dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_out_total / self.k_heads
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatHead {
    /// `head_dim × d_in`
    pub w: ParamId,
    /// `1 × 2·head_dim`
    pub a: ParamId,
}

#[derive(Debug, Clone)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    d_in: usize,
    head_dim: usize,
    dropout_rate: f64,
}

impl GatLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        k_heads: usize,
        d_in: usize,
        d_out_total: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Self {
        let head_dim = d_out_total / k_heads;
        let heads = (0..k_heads)
            .map(|k| {
                let wn = format!("{prefix}.head{k}.w");
                let an = format!("{prefix}.head{k}.a");
                let w = store.add_trainable(&wn, xavier(head_dim, d_in, &mut rng_for(seed, &wn)));
                let a = store.add_trainable(&an, xavier(1, 2 * head_dim, &mut rng_for(seed, &an)));
                GatHead { w, a }
            })
            .collect();
        Self {
            heads,
            d_in,
            head_dim,
            dropout_rate,
        }
    }

    pub fn d_out(&self) -> usize {
        self.head_dim * self.heads.len()
    }

    fn check(&self, tape: &Tape, h: Var, adj: &AdjacencyMatrix) -> Result<()> {
        let (rows, cols) = tape.shape(h);
        if rows != adj.size() {
            return Err(Error::dims(format!(
                "{rows} feature rows for an adjacency over {} nodes",
                adj.size()
            )));
        }
        if cols != self.d_in {
            return Err(Error::dims(format!("GAT expects width {}, got {cols}", self.d_in)));
        }
        Ok(())
    }

    /// Projected features `W_k h` and normalized coefficients for one head.
    fn head(&self, tape: &mut Tape, head: GatHead, h: Var, adj: &AdjacencyMatrix) -> (Var, Var) {
        let w = tape.param(head.w);
        let a = tape.param(head.a);
        let z = tape.matmul_nt(h, w);
        let a_src = tape.slice_cols(a, 0, self.head_dim);
        let a_dst = tape.slice_cols(a, self.head_dim, 2 * self.head_dim);
        let s_src = tape.matmul_nt(z, a_src);
        let s_dst = tape.matmul_nt(z, a_dst);
        let e = tape.outer_add(s_src, s_dst);
        let e = tape.leaky_relu(e, LEAKY_SLOPE);
        let alpha = tape.masked_softmax_rows(e, adj.mask());
        (z, alpha)
    }

    /// Per-head `α` matrices (`n × n`), without dropout.
    pub fn attention_coeffs(
        &self,
        tape: &mut Tape,
        h: Var,
        adj: &AdjacencyMatrix,
    ) -> Result<Vec<Var>> {
        self.check(tape, h, adj)?;
        Ok(self
            .heads
            .iter()
            .map(|&head| self.head(tape, head, h, adj).1)
            .collect())
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, adj: &AdjacencyMatrix) -> Result<Var> {
        self.check(tape, h, adj)?;
        let h = tape.dropout(h, self.dropout_rate);
        let outputs: Vec<Var> = self
            .heads
            .iter()
            .map(|&head| {
                let (z, alpha) = self.head(tape, head, h, adj);
                let alpha = tape.dropout(alpha, self.dropout_rate);
                let agg = tape.matmul(alpha, z);
                tape.elu(agg)
            })
            .collect();
        Ok(tape.concat_cols(&outputs))
    }
}

/// One or more stacked layers; the first maps `d_in → d_g`, later ones `d_g → d_g`.
#[derive(Debug, Clone)]
pub struct Gat {
    config: GatConfig,
    pub layers: Vec<GatLayer>,
}

impl Gat {
    pub fn new(config: GatConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| {
                let d_in = if l == 0 { config.d_in } else { config.d_out_total };
                GatLayer::new(
                    store,
                    &format!("gat.layer{l}"),
                    config.k_heads,
                    d_in,
                    config.d_out_total,
                    config.dropout_rate,
                    config.seed,
                )
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &GatConfig {
        &self.config
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, adj: &AdjacencyMatrix) -> Result<Var> {
        let mut x = h;
        for layer in &self.layers {
            x = layer.forward(tape, x, adj)?;
        }
        Ok(x)
    }
}

/// Value-level forward of a single layer.
pub fn gat_forward(
    store: &ParamStore,
    layer: &GatLayer,
    h: &TokenFeatures,
    adj: &AdjacencyMatrix,
    mode: Mode,
    seed: u64,
) -> Result<TokenFeatures> {
    let mut tape = Tape::with_seed(store, mode, seed);
    let x = tape.constant(h.0.clone());
    let g = layer.forward(&mut tape, x, adj)?;
    Ok(TokenFeatures(tape.value(g).clone()))
}

/// Value-level attention coefficients of a single layer.
pub fn attention_coeffs(
    store: &ParamStore,
    layer: &GatLayer,
    h: &TokenFeatures,
    adj: &AdjacencyMatrix,
) -> Result<Vec<Array2<f64>>> {
    let mut tape = Tape::new(store, Mode::Eval);
    let x = tape.constant(h.0.clone());
    let alphas = layer.attention_coeffs(&mut tape, x, adj)?;
    Ok(alphas.into_iter().map(|a| tape.value(a).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depgraph::{build_adjacency, DepParse};
    use ndarray::array;

    fn layer(store: &mut ParamStore, k: usize, d_in: usize, d_out: usize, drop: f64) -> GatLayer {
        GatLayer::new(store, "t", k, d_in, d_out, drop, 3)
    }

    #[test]
    fn single_node_self_loop() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 1, 2, 2, 0.0);
        let h = TokenFeatures(array![[0.4, -0.3]]);
        let adj = AdjacencyMatrix::identity(1);
        let alpha = attention_coeffs(&store, &l, &h, &adj).unwrap();
        assert_eq!(alpha[0], array![[1.0]]);
        let g = gat_forward(&store, &l, &h, &adj, Mode::Eval, 0).unwrap();
        let z = h.0.dot(&store.get(l.heads[0].w).t());
        assert_eq!(g.0, z.mapv(crate::tape::elu));
    }

    #[test]
    fn identical_neighbors_get_uniform_weight() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 2, 3, 4, 0.0);
        let h = TokenFeatures(Array2::from_elem((5, 3), 0.7));
        let adj = build_adjacency(&DepParse::new(vec![0, 1, 1], 1).unwrap());
        for alpha in attention_coeffs(&store, &l, &h, &adj).unwrap() {
            for i in 0..5 {
                let nb = adj.neighbors(i);
                for j in 0..5 {
                    let expect = if adj.is_edge(i, j) { 1.0 / nb.len() as f64 } else { 0.0 };
                    assert!((alpha[[i, j]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_adjacency_gives_identity_coeffs() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 2, 3, 4, 0.0);
        let h = TokenFeatures(array![[0.1, 0.2, 0.3], [-0.5, 0.9, 0.0], [1.0, -1.0, 0.5]]);
        for alpha in attention_coeffs(&store, &l, &h, &AdjacencyMatrix::identity(3)).unwrap() {
            assert_eq!(alpha, Array2::eye(3));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 1, 3, 2, 0.0);
        let h = TokenFeatures(Array2::zeros((3, 3)));
        assert!(matches!(
            gat_forward(&store, &l, &h, &AdjacencyMatrix::identity(4), Mode::Eval, 0),
            Err(Error::DimensionMismatch(_))
        ));
        let h = TokenFeatures(Array2::zeros((4, 2)));
        assert!(gat_forward(&store, &l, &h, &AdjacencyMatrix::identity(4), Mode::Eval, 0).is_err());
    }

    #[test]
    fn train_dropout_is_seeded() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 2, 3, 4, 0.5);
        let h = TokenFeatures(array![[0.1, 0.2, 0.3], [-0.5, 0.9, 0.0], [1.0, -1.0, 0.5]]);
        let adj = build_adjacency(&DepParse::new(vec![0], 1).unwrap());
        let a = gat_forward(&store, &l, &h, &adj, Mode::Train, 11).unwrap();
        let b = gat_forward(&store, &l, &h, &adj, Mode::Train, 11).unwrap();
        let e1 = gat_forward(&store, &l, &h, &adj, Mode::Eval, 11).unwrap();
        let e2 = gat_forward(&store, &l, &h, &adj, Mode::Eval, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(e1, e2);
        assert_ne!(a, e1);
    }

    #[test]
    fn config_validation() {
        let mut c = GatConfig {
            k_heads: 3,
            d_in: 4,
            d_out_total: 8,
            dropout_rate: 0.1,
            layers: 1,
            seed: 0,
        };
        assert!(c.validate().is_err());
        c.k_heads = 2;
        assert!(c.validate().is_ok());
        assert_eq!(c.head_dim(), 4);
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }
}
